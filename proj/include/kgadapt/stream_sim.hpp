#pragma once
// Synthetic labelled frame streams with scheduled anomaly shifts, the AUC
// metric and the adaptive-vs-static experiment harness.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kgadapt/config.hpp"
#include "kgadapt/model.hpp"
#include "kgadapt/retrieval.hpp"

namespace kgadapt {

class TooManyConceptsForDim : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class SingleClass : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConceptSpec {
  std::string name;
  std::vector<double> direction;  // unit norm
};

// Orthonormal directions by Gram-Schmidt; the second concept of every weak
// pair is then rebuilt as 0.8 a + 0.6 b_perp. Strong pairs stay orthogonal.
std::vector<ConceptSpec> make_concepts(
    const std::vector<std::string>& names,
    const std::vector<std::pair<std::string, std::string>>& weak_pairs,
    const std::vector<std::pair<std::string, std::string>>& strong_pairs, std::size_t dim,
    std::uint64_t seed);

const ConceptSpec& find_concept(const std::vector<ConceptSpec>& concepts, const std::string& name);
double cosine(std::span<const double> a, std::span<const double> b);

struct ScheduleEntry {
  std::string concept_name;
  std::size_t start = 0;  // first frame
  std::size_t end = 0;    // one past the last frame
};

struct StreamConfig {
  std::string normal = "normal";
  std::vector<ScheduleEntry> schedule;
  double anomaly_rate = 0.3;
  double noise_std = 0.1;
  double scale = 1.0;
  double background = 0.0;  // weight of the normal concept inside anomalous frames
  std::size_t total_frames = 0;
  std::size_t event_length = 8;
  int anomaly_label = 1;
  std::uint64_t seed = 0;
};

// Frames come in events of event_length; an event is anomalous with
// probability anomaly_rate when an anomaly is scheduled at its frames.
// Frame = scale * concept direction + N(0, noise_std^2); anomalous frames
// also carry scale * background * normal direction.
std::vector<FrameRecord> generate_stream(const StreamConfig& cfg,
                                         const std::vector<ConceptSpec>& concepts);

// Mann-Whitney AUC; label > 0 is positive, ties count one half.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct SyntheticWorld {
  std::vector<ConceptSpec> concepts;
  Vocabulary vocab;
  TokenEmbeddingTable table;
};

// Vocabulary: <unk>, one seed word per concept, the mock lexicon of every
// concept that has one (plus a background lexicon for "normal"), fillers.
// Seed-word rows are word_scale * direction; lexicon words scatter around
// their concept with offsets of norm word_noise.
SyntheticWorld build_world(const WorldConfig& cfg, std::uint64_t seed);
std::vector<std::string> background_lexicon();

struct SeriesPoint {
  std::size_t pass = 0;
  std::string arm;
  double auc = 0.0;
  double m_t = 0.0;
  std::size_t K = 0;
  std::vector<std::string> events;
};

struct ArmSummary {
  double pre_shift_auc = 0.0;
  double at_shift_auc = 0.0;
  double final_auc = 0.0;
  std::optional<std::size_t> recovery_passes;  // passes after the shift to >= 95% of pre
  std::size_t adaptation_passes = 0;           // passes that updated tokens
  std::size_t pruned = 0;
  double mean_ops_per_pass = 0.0;
};

struct RetrievalCheck {
  NodeId node = 0;
  std::string text;
  double displacement = 0.0;
  std::vector<std::vector<Neighbor>> adapted;
  std::vector<std::vector<Neighbor>> baseline;
  bool adapted_hit = false;
  bool baseline_hit = false;
};

struct ExperimentReport {
  std::string shifted_concept;
  std::size_t shift_pass = 0;  // first pass that saw a shifted frame
  std::vector<SeriesPoint> series;
  ArmSummary adaptive;
  ArmSummary static_arm;
  RetrievalCheck retrieval;
  bool static_unchanged = false;
  std::vector<PassRecord> adaptive_passes;
  std::vector<double> adaptive_seconds;
  std::vector<double> static_seconds;
  Model adaptive_model;
  Model static_model;
  Vocabulary vocab;
};

// Builds the world and KG, trains, deploys, then runs the adaptive and the
// static arm on the same stream.
ExperimentReport run_experiment(const RunConfig& cfg);

// Streams and the trained, deployed model of an experiment, for callers that
// drive the engine themselves.
struct ExperimentSetup {
  SyntheticWorld world;
  ReasoningKg kg;
  Model model;
  std::vector<FrameRecord> deployment;
  std::map<std::string, std::vector<FrameRecord>> test_sets;
  std::vector<StepRecord> training;
};
ExperimentSetup prepare_experiment(const RunConfig& cfg, std::ostream* train_log = nullptr);

void write_series(const ExperimentReport& r, std::ostream& out);
std::string summary_json(const ExperimentReport& r, const RunConfig& cfg);

}  // namespace kgadapt
