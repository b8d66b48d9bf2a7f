#include "kgadapt/kg_builder.hpp"

#include <algorithm>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <map>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "httplib.h"
#include "json.hpp"

#include "kgadapt/seeding.hpp"
#include "kgadapt/text_util.hpp"

namespace kgadapt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Mock lexicon and source

MissionLexicon mock_lexicon(const std::string& mission) {
  const std::string m = normalize_text(mission);
  if (m == "stealing" || m == "theft") {
    return {{"sneaky", "hidden", "quick", "suspicious", "concealed", "quiet", "furtive",
             "unattended", "nervous", "careful"},
            {"behavior", "grabbing", "pocket", "bag", "glance", "movement", "item", "shelf",
             "hand", "exit"}};
  }
  if (m == "robbery") {
    return {{"armed", "aggressive", "threatening", "violent", "forceful", "masked", "hostile",
             "demanding", "dangerous", "intimidating"},
            {"firearm", "weapon", "threat", "cashier", "gun", "confrontation", "victim", "counter",
             "demand", "knife"}};
  }
  if (m == "explosion") {
    return {{"bright", "loud", "burning", "massive", "shattered", "smoky", "fiery", "scattered",
             "blinding", "intense"},
            {"blast", "fire", "flash", "debris", "smoke", "flame", "shockwave", "rubble",
             "fireball", "crater"}};
  }
  if (m == "fighting") {
    return {{"physical", "angry", "repeated", "clenched", "heated", "brutal", "wild", "mutual",
             "close", "rapid"},
            {"punch", "kick", "brawl", "struggle", "shove", "fist", "grapple", "scuffle", "strike",
             "crowd"}};
  }
  return {{"unusual", "abnormal", "odd", "irregular", "strange", "erratic", "rare", "atypical"},
          {"activity", "event", "motion", "object", "person", "scene", "action", "pattern"}};
}

std::vector<std::string> mock_lexicon_missions() {
  return {"stealing", "robbery", "explosion", "fighting", "generic"};
}

MockKnowledgeSource::MockKnowledgeSource(std::uint64_t seed, MockSourceOptions options)
    : rng_(derive_seed(seed, "mock-knowledge-source")), options_(options) {}

bool MockKnowledgeSource::roll(double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p;
}

std::vector<std::string> MockKnowledgeSource::fresh_phrases(const std::string& mission,
                                                            std::size_t count) {
  const MissionLexicon lex = mock_lexicon(mission);
  std::vector<std::string> pool;
  for (const auto& m : lex.modifiers) {
    for (const auto& n : lex.nouns) {
      std::string phrase = m + " " + n;
      if (!emitted_.contains(phrase)) pool.push_back(std::move(phrase));
    }
  }
  std::shuffle(pool.begin(), pool.end(), rng_);
  pool.resize(std::min(pool.size(), count));
  for (const auto& p : pool) emitted_.insert(p);
  return pool;
}

std::vector<std::string> MockKnowledgeSource::initial_nodes(const std::string& mission) {
  return fresh_phrases(mission, static_cast<std::size_t>(std::max(1, options_.initial_count)));
}

std::vector<std::string> MockKnowledgeSource::expand(const std::string& mission,
                                                     const std::vector<std::string>& current) {
  const int hi = std::max(2, options_.max_level_size);
  const int count = std::uniform_int_distribution<int>(2, hi)(rng_);
  auto next = fresh_phrases(mission, static_cast<std::size_t>(count));
  if (!current.empty() && roll(options_.error_rate)) {
    // A concept repeated from the level below.
    next.push_back(current[rng_() % current.size()]);
  }
  return next;
}

std::vector<TextEdge> MockKnowledgeSource::propose_edges(const std::vector<std::string>& current,
                                                         const std::vector<std::string>& next) {
  std::vector<TextEdge> edges;
  if (current.empty() || next.empty()) return edges;
  for (std::size_t i = 0; i < current.size(); ++i) {
    edges.emplace_back(current[i], next[i % next.size()]);
  }
  for (std::size_t j = 0; j < next.size(); ++j) {
    edges.emplace_back(current[j % current.size()], next[j]);
  }
  for (const auto& c : current) {
    for (const auto& n : next) {
      if (roll(0.2)) edges.emplace_back(c, n);
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  if (next.size() >= 2 && roll(options_.error_rate)) {
    // Skips the hierarchy: both endpoints sit on the new level.
    edges.emplace_back(next[0], next[1]);
  }
  return edges;
}

LevelDraft MockKnowledgeSource::correct(const std::vector<DraftIssue>& issues,
                                        const LevelDraft& draft) {
  LevelDraft out = draft;
  for (const DraftIssue& issue : issues) {
    if (!roll(options_.fix_rate) || issue.texts.empty()) continue;
    switch (issue.code) {
      case IssueCode::duplicated_concept: {
        const std::string& t = issue.texts.front();
        auto it = std::find(out.texts.rbegin(), out.texts.rend(), t);
        if (it != out.texts.rend()) out.texts.erase(std::next(it).base());
        if (std::find(out.texts.begin(), out.texts.end(), t) == out.texts.end()) {
          std::erase_if(out.edges, [&](const TextEdge& e) { return e.second == t; });
        }
        break;
      }
      case IssueCode::invalid_edge:
        if (issue.texts.size() == 2) {
          const TextEdge bad{issue.texts[0], issue.texts[1]};
          auto it = std::find(out.edges.begin(), out.edges.end(), bad);
          if (it != out.edges.end()) out.edges.erase(it);
        }
        break;
      case IssueCode::orphan_node: {
        const std::string& t = issue.texts.front();
        if (std::find(out.texts.begin(), out.texts.end(), t) != out.texts.end()) {
          std::erase(out.texts, t);
          std::erase_if(out.edges, [&](const TextEdge& e) { return e.second == t; });
        } else if (!out.texts.empty()) {
          out.edges.emplace_back(t, out.texts.front());
        }
        break;
      }
      case IssueCode::terminal_error:
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wire protocol

namespace {

IssueCode issue_code_from_string(const std::string& s) {
  for (IssueCode c : {IssueCode::duplicated_concept, IssueCode::invalid_edge,
                      IssueCode::orphan_node, IssueCode::terminal_error}) {
    if (to_string(c) == s) return c;
  }
  throw BuildError(BuildErrorCode::source_unavailable, "unknown issue code '" + s + "'");
}

json edges_to_json(const std::vector<TextEdge>& edges) {
  json arr = json::array();
  for (const auto& [a, b] : edges) arr.push_back(json::array({a, b}));
  return arr;
}

std::vector<TextEdge> edges_from_json(const json& arr) {
  std::vector<TextEdge> out;
  for (const auto& e : arr) out.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
  return out;
}

json parse_response(const std::string& response) {
  json doc;
  try {
    doc = json::parse(response);
  } catch (const json::exception& e) {
    throw BuildError(BuildErrorCode::source_unavailable,
                     std::string("malformed knowledge-source response: ") + e.what());
  }
  if (doc.contains("error")) {
    throw BuildError(BuildErrorCode::source_unavailable,
                     "knowledge source error: " + doc["error"].dump());
  }
  return doc;
}

template <typename F>
auto guarded(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw BuildError(BuildErrorCode::source_unavailable,
                     std::string("malformed knowledge-source response: ") + e.what());
  }
}

}  // namespace

namespace protocol {

std::string request_initial(const std::string& mission) {
  return json{{"op", "initial_nodes"}, {"mission", mission}, {"payload", json::object()}}.dump();
}

std::string request_expand(const std::string& mission, const std::vector<std::string>& current) {
  return json{{"op", "expand"}, {"mission", mission}, {"payload", {{"current", current}}}}.dump();
}

std::string request_edges(const std::vector<std::string>& current,
                          const std::vector<std::string>& next) {
  return json{{"op", "propose_edges"},
              {"mission", ""},
              {"payload", {{"current", current}, {"next", next}}}}
      .dump();
}

std::string request_correct(const std::vector<DraftIssue>& issues, const LevelDraft& draft) {
  json is = json::array();
  for (const auto& i : issues) {
    is.push_back({{"code", std::string(to_string(i.code))}, {"texts", i.texts}, {"message", i.message}});
  }
  return json{{"op", "correct"},
              {"mission", ""},
              {"payload",
               {{"issues", is}, {"draft", {{"texts", draft.texts}, {"edges", edges_to_json(draft.edges)}}}}}}
      .dump();
}

std::string serve(KnowledgeSource& source, const std::string& request_line) {
  try {
    const json req = json::parse(request_line);
    const std::string op = req.at("op").get<std::string>();
    const std::string mission = req.value("mission", "");
    const json& payload = req.at("payload");
    if (op == "initial_nodes") return json{{"texts", source.initial_nodes(mission)}}.dump();
    if (op == "expand") {
      return json{{"texts", source.expand(mission, payload.at("current").get<std::vector<std::string>>())}}
          .dump();
    }
    if (op == "propose_edges") {
      const auto edges = source.propose_edges(payload.at("current").get<std::vector<std::string>>(),
                                              payload.at("next").get<std::vector<std::string>>());
      return json{{"edges", edges_to_json(edges)}}.dump();
    }
    if (op == "correct") {
      std::vector<DraftIssue> issues;
      for (const auto& i : payload.at("issues")) {
        issues.push_back(DraftIssue{issue_code_from_string(i.at("code").get<std::string>()),
                                    i.at("texts").get<std::vector<std::string>>(),
                                    i.value("message", "")});
      }
      const json& d = payload.at("draft");
      LevelDraft draft{d.at("texts").get<std::vector<std::string>>(), edges_from_json(d.at("edges"))};
      const LevelDraft revised = source.correct(issues, draft);
      return json{{"revised", {{"texts", revised.texts}, {"edges", edges_to_json(revised.edges)}}}}
          .dump();
    }
    return json{{"error", "unknown op '" + op + "'"}}.dump();
  } catch (const std::exception& e) {
    return json{{"error", e.what()}}.dump();
  }
}

std::vector<std::string> parse_texts(const std::string& response) {
  const json doc = parse_response(response);
  return guarded([&] { return doc.at("texts").get<std::vector<std::string>>(); });
}

std::vector<TextEdge> parse_edges(const std::string& response) {
  const json doc = parse_response(response);
  return guarded([&] { return edges_from_json(doc.at("edges")); });
}

LevelDraft parse_revised(const std::string& response) {
  const json doc = parse_response(response);
  return guarded([&] {
    const json& r = doc.at("revised");
    return LevelDraft{r.at("texts").get<std::vector<std::string>>(), edges_from_json(r.at("edges"))};
  });
}

}  // namespace protocol

// ---------------------------------------------------------------------------
// Subprocess source

CommandKnowledgeSource::CommandKnowledgeSource(const std::string& command) {
  int in_pipe[2];
  int out_pipe[2];
  if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) {
    throw BuildError(BuildErrorCode::source_unavailable, "pipe() failed");
  }
  const pid_t pid = fork();
  if (pid < 0) throw BuildError(BuildErrorCode::source_unavailable, "fork() failed");
  if (pid == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  // A dead child must surface as an error, not a signal.
  std::signal(SIGPIPE, SIG_IGN);
}

CommandKnowledgeSource::~CommandKnowledgeSource() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    waitpid(pid_, &status, 0);
  }
}

std::string CommandKnowledgeSource::call(const std::string& request_line) {
  const std::string line = request_line + "\n";
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = write(to_child_, line.data() + written, line.size() - written);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw BuildError(BuildErrorCode::source_unavailable, "knowledge source closed its input");
    written += static_cast<std::size_t>(n);
  }
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string response = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return response;
    }
    char chunk[4096];
    const ssize_t n = read(from_child_, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw BuildError(BuildErrorCode::source_unavailable, "knowledge source exited");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

std::vector<std::string> CommandKnowledgeSource::initial_nodes(const std::string& mission) {
  return protocol::parse_texts(call(protocol::request_initial(mission)));
}

std::vector<std::string> CommandKnowledgeSource::expand(const std::string& mission,
                                                        const std::vector<std::string>& current) {
  return protocol::parse_texts(call(protocol::request_expand(mission, current)));
}

std::vector<TextEdge> CommandKnowledgeSource::propose_edges(const std::vector<std::string>& current,
                                                            const std::vector<std::string>& next) {
  return protocol::parse_edges(call(protocol::request_edges(current, next)));
}

LevelDraft CommandKnowledgeSource::correct(const std::vector<DraftIssue>& issues,
                                           const LevelDraft& draft) {
  return protocol::parse_revised(call(protocol::request_correct(issues, draft)));
}

// ---------------------------------------------------------------------------
// HTTP source

HttpKnowledgeSource::HttpKnowledgeSource(const std::string& url) {
  const std::string prefix = "http://";
  if (url.rfind(prefix, 0) != 0) {
    throw BuildError(BuildErrorCode::source_unavailable, "expected http:// URL, got " + url);
  }
  std::string rest = url.substr(prefix.size());
  const auto slash = rest.find('/');
  std::string hostport = rest.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  const auto colon = hostport.rfind(':');
  if (colon != std::string::npos) {
    host_ = hostport.substr(0, colon);
    port_ = std::stoi(hostport.substr(colon + 1));
  } else {
    host_ = hostport;
  }
}

std::string HttpKnowledgeSource::call(const std::string& request_body) {
  httplib::Client client(host_, port_);
  client.set_read_timeout(60, 0);
  auto res = client.Post(path_, request_body, "application/json");
  if (!res || res->status != 200) {
    throw BuildError(BuildErrorCode::source_unavailable,
                     "knowledge source at " + host_ + ":" + std::to_string(port_) + path_ +
                         " unavailable");
  }
  return res->body;
}

std::vector<std::string> HttpKnowledgeSource::initial_nodes(const std::string& mission) {
  return protocol::parse_texts(call(protocol::request_initial(mission)));
}

std::vector<std::string> HttpKnowledgeSource::expand(const std::string& mission,
                                                     const std::vector<std::string>& current) {
  return protocol::parse_texts(call(protocol::request_expand(mission, current)));
}

std::vector<TextEdge> HttpKnowledgeSource::propose_edges(const std::vector<std::string>& current,
                                                         const std::vector<std::string>& next) {
  return protocol::parse_edges(call(protocol::request_edges(current, next)));
}

LevelDraft HttpKnowledgeSource::correct(const std::vector<DraftIssue>& issues,
                                        const LevelDraft& draft) {
  return protocol::parse_revised(call(protocol::request_correct(issues, draft)));
}

std::unique_ptr<KnowledgeSource> make_knowledge_source(const std::string& spec, std::uint64_t seed,
                                                       MockSourceOptions mock_options) {
  if (spec == "mock") return std::make_unique<MockKnowledgeSource>(seed, mock_options);
  if (spec.rfind("cmd:", 0) == 0) return std::make_unique<CommandKnowledgeSource>(spec.substr(4));
  if (spec.rfind("http://", 0) == 0) return std::make_unique<HttpKnowledgeSource>(spec);
  throw BuildError(BuildErrorCode::source_unavailable, "unknown knowledge source '" + spec + "'");
}

// ---------------------------------------------------------------------------
// Generation loop

std::vector<DraftIssue> check_draft(const LevelDraft& draft, const ReasoningKg& kg_so_far,
                                    const std::vector<std::string>& current_level) {
  std::vector<DraftIssue> issues;
  std::set<std::string> seen;
  std::set<std::string> clean;  // non-duplicate draft texts
  for (const auto& t : draft.texts) {
    const std::string key = normalize_text(t);
    if (kg_so_far.find_text(key)) {
      issues.push_back({IssueCode::duplicated_concept, {t}, "concept already present in an earlier level"});
    } else if (!seen.insert(key).second) {
      issues.push_back({IssueCode::duplicated_concept, {t}, "concept repeated within the level"});
    } else {
      clean.insert(t);
    }
  }
  const std::set<std::string> current(current_level.begin(), current_level.end());
  std::set<TextEdge> edges_seen;
  std::set<std::string> has_parent;
  std::set<std::string> has_child;
  for (const auto& e : draft.edges) {
    if (!current.contains(e.first) || std::find(draft.texts.begin(), draft.texts.end(), e.second) ==
                                          draft.texts.end()) {
      issues.push_back({IssueCode::invalid_edge, {e.first, e.second},
                        "edge must connect the current level to the new level"});
      continue;
    }
    if (!edges_seen.insert(e).second) {
      issues.push_back({IssueCode::invalid_edge, {e.first, e.second}, "duplicate edge"});
      continue;
    }
    if (clean.contains(e.second)) {
      has_parent.insert(e.second);
      has_child.insert(e.first);
    }
  }
  if (!current_level.empty()) {
    for (const auto& t : clean) {
      if (!has_parent.contains(t)) issues.push_back({IssueCode::orphan_node, {t}, "no parent"});
    }
    for (const auto& t : current_level) {
      if (!has_child.contains(t)) issues.push_back({IssueCode::orphan_node, {t}, "no child"});
    }
  }
  return issues;
}

namespace {

// Deterministic fallback once the correction budget is spent.
LevelDraft prune_draft(const LevelDraft& draft, const ReasoningKg& kg_so_far,
                       const std::vector<std::string>& current_level) {
  const std::set<std::string> current(current_level.begin(), current_level.end());
  LevelDraft out;
  // 1. duplicates: drop texts already in the graph and later repeats.
  std::set<std::string> kept_keys;
  std::set<std::string> dropped;
  for (const auto& t : draft.texts) {
    const std::string key = normalize_text(t);
    if (kg_so_far.find_text(key)) {
      dropped.insert(t);
      continue;
    }
    if (!kept_keys.insert(key).second) continue;
    out.texts.push_back(t);
  }
  const std::set<std::string> texts(out.texts.begin(), out.texts.end());
  // 2. invalid edges, and edges into dropped duplicates.
  std::set<TextEdge> seen;
  for (const auto& e : draft.edges) {
    if (!current.contains(e.first) || !texts.contains(e.second) || dropped.contains(e.second)) {
      continue;
    }
    if (seen.insert(e).second) out.edges.push_back(e);
  }
  // 3. nodes left without a parent.
  if (!current_level.empty()) {
    std::set<std::string> parented;
    for (const auto& e : out.edges) parented.insert(e.second);
    std::erase_if(out.texts, [&](const std::string& t) { return !parented.contains(t); });
  }
  return out;
}

// Removes concept nodes below top_level that no longer have children,
// walking down so that newly stranded parents go too.
void prune_dead_ends(ReasoningKg& kg, int top_level) {
  for (int level = top_level - 1; level >= 1; --level) {
    for (NodeId id : kg.level_nodes(level)) {
      if (kg.children(id).empty()) kg.remove_node(id);
    }
    if (kg.level_nodes(level).empty()) {
      throw BuildError(BuildErrorCode::empty_level,
                       "level " + std::to_string(level) + " lost every node while pruning");
    }
  }
}

}  // namespace

AcceptedLevel correction_loop(const LevelDraft& draft, const ReasoningKg& kg_so_far,
                              const std::vector<std::string>& current_level,
                              const GenerationConfig& cfg, KnowledgeSource& src) {
  AcceptedLevel result{draft, 0, false};
  auto issues = check_draft(result.draft, kg_so_far, current_level);
  while (!issues.empty() && result.correction_calls < cfg.max_correction_iters) {
    result.draft = src.correct(issues, result.draft);
    ++result.correction_calls;
    issues = check_draft(result.draft, kg_so_far, current_level);
  }
  if (!issues.empty()) {
    result.draft = prune_draft(result.draft, kg_so_far, current_level);
    result.pruned = true;
  }
  if (result.draft.texts.empty()) {
    throw BuildError(BuildErrorCode::empty_level, "level has no surviving concepts");
  }
  return result;
}

ReasoningKg generate_kg(const std::string& mission, const GenerationConfig& cfg,
                        KnowledgeSource& src, const Vocabulary& vocab, GenerationTrace* trace) {
  if (cfg.depth < 1) throw std::invalid_argument("generation depth must be at least 1");
  ReasoningKg kg(mission, cfg.depth);
  std::vector<std::string> current;
  std::map<std::string, NodeId> ids;
  for (int level = 1; level <= cfg.depth; ++level) {
    LevelDraft draft;
    if (level == 1) {
      draft.texts = src.initial_nodes(mission);
    } else {
      draft.texts = src.expand(mission, current);
      draft.edges = src.propose_edges(current, draft.texts);
    }
    const AcceptedLevel accepted = correction_loop(draft, kg, current, cfg, src);
    if (trace != nullptr) {
      trace->correction_calls.push_back(accepted.correction_calls);
      trace->pruned.push_back(accepted.pruned);
    }
    for (const auto& t : accepted.draft.texts) {
      ids[t] = kg.add_node(level, normalize_text(t), vocab.tokenize(t));
    }
    for (const auto& [a, b] : accepted.draft.edges) kg.add_edge(ids.at(a), ids.at(b));
    if (level > 1) prune_dead_ends(kg, level);
    current.clear();
    for (NodeId id : kg.level_nodes(level)) current.push_back(kg.node(id).text);
  }
  ReasoningKg out = attach_terminals(kg);
  const auto report = validate(out);
  if (!report.ok) {
    throw std::logic_error("generated KG failed validation: " + report.issues.front().message);
  }
  return out;
}

}  // namespace kgadapt
