#pragma once
// Mission-specific KG generation: level-by-level node generation, edge
// generation and a bounded detect/correct loop against a knowledge source.

#include <cstdint>
#include <memory>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kgadapt/embedding_space.hpp"
#include "kgadapt/kg_model.hpp"

namespace kgadapt {

enum class BuildErrorCode { source_unavailable, empty_level };

class BuildError : public std::runtime_error {
 public:
  BuildError(BuildErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  BuildErrorCode code() const { return code_; }

 private:
  BuildErrorCode code_;
};

using TextEdge = std::pair<std::string, std::string>;

// Proposed nodes of one level plus edges from the level below, by text.
struct LevelDraft {
  std::vector<std::string> texts;
  std::vector<TextEdge> edges;

  friend bool operator==(const LevelDraft&, const LevelDraft&) = default;
};

struct DraftIssue {
  IssueCode code;
  std::vector<std::string> texts;
  std::string message;
};

class KnowledgeSource {
 public:
  virtual ~KnowledgeSource() = default;
  virtual std::vector<std::string> initial_nodes(const std::string& mission) = 0;
  virtual std::vector<std::string> expand(const std::string& mission,
                                          const std::vector<std::string>& current) = 0;
  virtual std::vector<TextEdge> propose_edges(const std::vector<std::string>& current,
                                              const std::vector<std::string>& next) = 0;
  virtual LevelDraft correct(const std::vector<DraftIssue>& issues, const LevelDraft& draft) = 0;
};

struct GenerationConfig {
  int depth = 2;
  int max_correction_iters = 3;
  std::uint64_t seed = 0;
};

// Built-in concept lexicon used by the mock source. Every word it can emit is
// listed, so a vocabulary can be built to cover it.
struct MissionLexicon {
  std::vector<std::string> modifiers;
  std::vector<std::string> nouns;
};
MissionLexicon mock_lexicon(const std::string& mission);
std::vector<std::string> mock_lexicon_missions();

struct MockSourceOptions {
  int initial_count = 4;
  int max_level_size = 4;
  // Probability of injecting a duplicate concept or an invalid edge per call,
  // and of the correction call fixing each reported issue.
  double error_rate = 0.15;
  double fix_rate = 0.6;
};

// Deterministic template expansion over mock_lexicon(mission). Output is a
// pure function of (seed, call sequence).
class MockKnowledgeSource final : public KnowledgeSource {
 public:
  explicit MockKnowledgeSource(std::uint64_t seed, MockSourceOptions options = {});

  std::vector<std::string> initial_nodes(const std::string& mission) override;
  std::vector<std::string> expand(const std::string& mission,
                                  const std::vector<std::string>& current) override;
  std::vector<TextEdge> propose_edges(const std::vector<std::string>& current,
                                      const std::vector<std::string>& next) override;
  LevelDraft correct(const std::vector<DraftIssue>& issues, const LevelDraft& draft) override;

 private:
  std::vector<std::string> fresh_phrases(const std::string& mission, std::size_t count);
  bool roll(double p);

  std::mt19937_64 rng_;
  MockSourceOptions options_;
  std::set<std::string> emitted_;
};

// Speaks the line-delimited JSON protocol to a child process over its
// stdin/stdout. One request line {op, mission, payload} in, one response line
// {texts | edges | revised} out.
class CommandKnowledgeSource final : public KnowledgeSource {
 public:
  explicit CommandKnowledgeSource(const std::string& command);
  ~CommandKnowledgeSource() override;
  CommandKnowledgeSource(const CommandKnowledgeSource&) = delete;
  CommandKnowledgeSource& operator=(const CommandKnowledgeSource&) = delete;

  std::vector<std::string> initial_nodes(const std::string& mission) override;
  std::vector<std::string> expand(const std::string& mission,
                                  const std::vector<std::string>& current) override;
  std::vector<TextEdge> propose_edges(const std::vector<std::string>& current,
                                      const std::vector<std::string>& next) override;
  LevelDraft correct(const std::vector<DraftIssue>& issues, const LevelDraft& draft) override;

 private:
  std::string call(const std::string& request_line);

  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

// Same request/response documents, one POST per call to a single endpoint.
class HttpKnowledgeSource final : public KnowledgeSource {
 public:
  // url like http://host:port/path
  explicit HttpKnowledgeSource(const std::string& url);

  std::vector<std::string> initial_nodes(const std::string& mission) override;
  std::vector<std::string> expand(const std::string& mission,
                                  const std::vector<std::string>& current) override;
  std::vector<TextEdge> propose_edges(const std::vector<std::string>& current,
                                      const std::vector<std::string>& next) override;
  LevelDraft correct(const std::vector<DraftIssue>& issues, const LevelDraft& draft) override;

 private:
  std::string call(const std::string& request_body);

  std::string host_;
  int port_ = 80;
  std::string path_;
};

// Wire protocol helpers shared by the remote sources and the stub server.
namespace protocol {
std::string request_initial(const std::string& mission);
std::string request_expand(const std::string& mission, const std::vector<std::string>& current);
std::string request_edges(const std::vector<std::string>& current,
                          const std::vector<std::string>& next);
std::string request_correct(const std::vector<DraftIssue>& issues, const LevelDraft& draft);
// Answers one request line with the given source; returns the response line.
std::string serve(KnowledgeSource& source, const std::string& request_line);
std::vector<std::string> parse_texts(const std::string& response);
std::vector<TextEdge> parse_edges(const std::string& response);
LevelDraft parse_revised(const std::string& response);
}  // namespace protocol

// "mock" (seeded), "cmd:<path and args>" or "http://host:port/path".
std::unique_ptr<KnowledgeSource> make_knowledge_source(const std::string& spec, std::uint64_t seed,
                                                       MockSourceOptions mock_options = {});

// Issues of a draft level against the graph built so far. current_level holds
// the texts of the level the draft attaches to (empty for level 1).
std::vector<DraftIssue> check_draft(const LevelDraft& draft, const ReasoningKg& kg_so_far,
                                    const std::vector<std::string>& current_level);

struct AcceptedLevel {
  LevelDraft draft;
  int correction_calls = 0;
  bool pruned = false;
};

// Repeats detect -> src.correct until the draft is clean or
// max_correction_iters calls were spent, then prunes what is still wrong:
// invalid edges first, then duplicate nodes, then nodes left without a parent.
AcceptedLevel correction_loop(const LevelDraft& draft, const ReasoningKg& kg_so_far,
                              const std::vector<std::string>& current_level,
                              const GenerationConfig& cfg, KnowledgeSource& src);

struct GenerationTrace {
  std::vector<int> correction_calls;  // per level
  std::vector<bool> pruned;           // per level
};

ReasoningKg generate_kg(const std::string& mission, const GenerationConfig& cfg,
                        KnowledgeSource& src, const Vocabulary& vocab,
                        GenerationTrace* trace = nullptr);

}  // namespace kgadapt
