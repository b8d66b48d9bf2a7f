#include "kgadapt/stream_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "json.hpp"
#include "kgadapt/seeding.hpp"

namespace kgadapt {

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (l2_norm(a) * l2_norm(b));
}

std::vector<ConceptSpec> make_concepts(
    const std::vector<std::string>& names,
    const std::vector<std::pair<std::string, std::string>>& weak_pairs,
    const std::vector<std::pair<std::string, std::string>>& strong_pairs, std::size_t dim,
    std::uint64_t seed) {
  if (names.size() > dim) {
    throw TooManyConceptsForDim(std::to_string(names.size()) + " concepts do not fit in " +
                                std::to_string(dim) + " dimensions");
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!index.emplace(names[i], i).second) {
      throw std::invalid_argument("concept '" + names[i] + "' named twice");
    }
  }
  const auto at = [&](const std::string& n) {
    auto it = index.find(n);
    if (it == index.end()) throw std::invalid_argument("unknown concept '" + n + "'");
    return it->second;
  };

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    // Two Gram-Schmidt sweeps keep the basis orthogonal to rounding level.
    for (int sweep = 0; sweep < 2; ++sweep) {
      for (const auto& b : basis) {
        double d = 0.0;
        for (std::size_t c = 0; c < dim; ++c) d += v[c] * b[c];
        for (std::size_t c = 0; c < dim; ++c) v[c] -= d * b[c];
      }
    }
    const double n = l2_norm(v);
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }

  std::vector<ConceptSpec> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.push_back({names[i], basis[i]});
  std::set<std::size_t> rebuilt;
  for (const auto& [a, b] : weak_pairs) {
    const std::size_t ia = at(a);
    const std::size_t ib = at(b);
    if (ia == ib || rebuilt.contains(ia) || !rebuilt.insert(ib).second) {
      throw std::invalid_argument("weak pairs must not chain or repeat concepts");
    }
    for (std::size_t c = 0; c < dim; ++c) {
      out[ib].direction[c] = 0.8 * basis[ia][c] + 0.6 * basis[ib][c];
    }
  }
  for (const auto& [a, b] : strong_pairs) {
    if (std::abs(cosine(out[at(a)].direction, out[at(b)].direction)) > 1e-6) {
      throw std::invalid_argument("strong pair " + a + "/" + b + " conflicts with a weak pair");
    }
  }
  return out;
}

const ConceptSpec& find_concept(const std::vector<ConceptSpec>& concepts, const std::string& name) {
  for (const auto& c : concepts) {
    if (c.name == name) return c;
  }
  throw std::invalid_argument("unknown concept '" + name + "'");
}

std::vector<FrameRecord> generate_stream(const StreamConfig& cfg,
                                         const std::vector<ConceptSpec>& concepts) {
  if (cfg.event_length < 1) throw std::invalid_argument("event_length must be at least 1");
  for (std::size_t i = 0; i < cfg.schedule.size(); ++i) {
    const auto& s = cfg.schedule[i];
    if (s.start > s.end || (i > 0 && s.start < cfg.schedule[i - 1].end)) {
      throw std::invalid_argument("anomaly schedule must be ordered and non-overlapping");
    }
  }
  const ConceptSpec& normal = find_concept(concepts, cfg.normal);
  std::vector<const ConceptSpec*> scheduled;
  for (const auto& s : cfg.schedule) scheduled.push_back(&find_concept(concepts, s.concept_name));

  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<FrameRecord> out;
  out.reserve(cfg.total_frames);
  bool anomalous_event = false;
  for (std::size_t t = 0; t < cfg.total_frames; ++t) {
    if (t % cfg.event_length == 0) anomalous_event = uniform(rng) < cfg.anomaly_rate;
    const ConceptSpec* active = nullptr;
    for (std::size_t i = 0; i < cfg.schedule.size(); ++i) {
      if (t >= cfg.schedule[i].start && t < cfg.schedule[i].end) active = scheduled[i];
    }
    const bool anomaly = anomalous_event && active != nullptr;
    const ConceptSpec& c = anomaly ? *active : normal;
    FrameRecord f;
    f.t = t;
    f.label = anomaly ? cfg.anomaly_label : 0;
    f.frame.resize(c.direction.size());
    for (std::size_t k = 0; k < f.frame.size(); ++k) {
      const double bg = anomaly ? cfg.background * normal.direction[k] : 0.0;
      f.frame[k] = cfg.scale * (c.direction[k] + bg) + cfg.noise_std * noise(rng);
    }
    out.push_back(std::move(f));
  }
  return out;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("one label per score expected");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  double pos = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] > 0) {
        rank_sum += avg_rank;
        pos += 1.0;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  if (pos == 0.0 || neg == 0.0) throw SingleClass("AUC needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

std::vector<std::string> background_lexicon() {
  return {"walking", "standing", "talking", "sitting", "street", "people",
          "shopping", "waiting", "entering", "leaving", "browsing", "queue"};
}

SyntheticWorld build_world(const WorldConfig& cfg, std::uint64_t seed) {
  SyntheticWorld w;
  w.concepts = make_concepts(cfg.concepts, cfg.weak_pairs, cfg.strong_pairs, cfg.dim,
                             derive_seed(seed, "concepts"));
  Rng rng = make_rng(seed, "vocabulary");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double per_coord = 1.0 / std::sqrt(static_cast<double>(cfg.dim));

  std::vector<std::string> words = {std::string(kUnkToken)};
  std::vector<std::vector<double>> rows = {std::vector<double>(cfg.dim, 0.0)};
  const auto add = [&](const std::string& word, std::vector<double> row) {
    words.push_back(word);
    rows.push_back(std::move(row));
  };
  for (const auto& c : w.concepts) {
    std::vector<double> r(cfg.dim);
    for (std::size_t k = 0; k < cfg.dim; ++k) r[k] = cfg.word_scale * c.direction[k];
    add(c.name, std::move(r));
  }
  const auto missions = mock_lexicon_missions();
  for (const auto& c : w.concepts) {
    std::vector<std::string> lex;
    if (c.name == "normal") {
      lex = background_lexicon();
    } else if (std::find(missions.begin(), missions.end(), c.name) != missions.end() &&
               c.name != "generic") {
      const MissionLexicon l = mock_lexicon(c.name);
      lex = l.modifiers;
      lex.insert(lex.end(), l.nouns.begin(), l.nouns.end());
    }
    for (const auto& word : lex) {
      std::vector<double> r(cfg.dim);
      for (std::size_t k = 0; k < cfg.dim; ++k) {
        r[k] = cfg.word_scale * c.direction[k] + cfg.word_noise * per_coord * normal(rng);
      }
      add(word, std::move(r));
    }
  }
  for (std::size_t i = 0; i < cfg.filler_words; ++i) {
    std::vector<double> r(cfg.dim);
    for (auto& v : r) v = cfg.filler_scale * per_coord * normal(rng);
    char name[32];
    std::snprintf(name, sizeof name, "filler%03zu", i);
    add(name, std::move(r));
  }
  w.vocab = Vocabulary(words);
  Matrix values(rows.size(), cfg.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), values.row(i).begin());
  }
  w.table = TokenEmbeddingTable(std::move(values), rows.size(), seed);
  return w;
}

ExperimentSetup prepare_experiment(const RunConfig& cfg, std::ostream* train_log) {
  ExperimentSetup s;
  s.world = build_world(cfg.world, derive_seed(cfg.seed, "world"));
  auto source = make_knowledge_source(cfg.source, derive_seed(cfg.seed, "kg_builder"), cfg.mock);
  GenerationConfig gen = cfg.generation;
  gen.seed = cfg.seed;
  s.kg = generate_kg(cfg.mission, gen, *source, s.world.vocab);
  s.model = Model::create({s.kg}, s.world.table, cfg.model, derive_seed(cfg.seed, "model"));

  const auto& st = cfg.stream;
  StreamConfig train_cfg;
  train_cfg.normal = st.normal;
  train_cfg.schedule = {{st.initial_anomaly, 0, st.train_frames}};
  train_cfg.anomaly_rate = st.anomaly_rate;
  train_cfg.noise_std = st.noise_std;
  train_cfg.scale = st.scale;
  train_cfg.background = st.background;
  train_cfg.total_frames = st.train_frames;
  train_cfg.event_length = st.event_length;
  train_cfg.anomaly_label = cfg.adaptation.anomaly_class;
  train_cfg.seed = derive_seed(cfg.seed, "train_stream");
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "training");
  s.training = train(s.model, generate_stream(train_cfg, s.world.concepts), tc, train_log);
  deploy(s.model);

  StreamConfig dep = train_cfg;
  dep.schedule = {{st.initial_anomaly, 0, st.shift_frame},
                  {st.shifted_anomaly, st.shift_frame, st.total_frames}};
  dep.total_frames = st.total_frames;
  dep.seed = derive_seed(cfg.seed, "deployment_stream");
  s.deployment = generate_stream(dep, s.world.concepts);

  for (const std::string& name : {st.initial_anomaly, st.shifted_anomaly}) {
    StreamConfig test = train_cfg;
    test.schedule = {{name, 0, st.test_frames}};
    test.total_frames = st.test_frames;
    test.seed = derive_seed(cfg.seed, "test_stream:" + name);
    s.test_sets[name] = generate_stream(test, s.world.concepts);
  }
  return s;
}

namespace {

struct CachedEvaluator {
  const std::map<std::string, std::vector<FrameRecord>>* tests;
  const std::string* concept_name;
  struct Entry {
    Matrix table;
    std::vector<ReasoningKg> kgs;
    double auc;
  };
  std::map<std::string, Entry> cache;

  double operator()(const Model& m) {
    std::vector<ReasoningKg> kgs;
    for (const auto& g : m.missions) kgs.push_back(g.kg);
    auto it = cache.find(*concept_name);
    if (it != cache.end() && it->second.table == m.table.values() && it->second.kgs == kgs) {
      return it->second.auc;
    }
    const auto& test = tests->at(*concept_name);
    std::vector<int> labels;
    for (const auto& f : test) labels.push_back(f.label);
    const double a = auc(score_stream(m, test), labels);
    cache[*concept_name] = {m.table.values(), std::move(kgs), a};
    return a;
  }
};

std::string key_string(const NodeKey& k) {
  return std::to_string(k.mission) + ":" + std::to_string(k.id);
}

ArmSummary summarize(const std::vector<PassRecord>& passes, std::size_t shift_pass) {
  ArmSummary s;
  double ops = 0.0;
  for (const auto& p : passes) {
    if (p.pass + 1 == shift_pass) s.pre_shift_auc = p.auc.value_or(0.0);
    if (p.pass == shift_pass) s.at_shift_auc = p.auc.value_or(0.0);
    if (p.adapted) ++s.adaptation_passes;
    s.pruned += p.pruned.size();
    ops += static_cast<double>(p.flops);
  }
  if (!passes.empty()) {
    s.final_auc = passes.back().auc.value_or(0.0);
    s.mean_ops_per_pass = ops / static_cast<double>(passes.size());
  }
  for (const auto& p : passes) {
    if (p.pass >= shift_pass && p.auc && *p.auc >= 0.95 * s.pre_shift_auc) {
      s.recovery_passes = p.pass - shift_pass;
      break;
    }
  }
  return s;
}

bool has_word(const std::vector<std::vector<Neighbor>>& lists, const std::string& word) {
  for (const auto& l : lists) {
    for (const auto& n : l) {
      if (n.word == word) return true;
    }
  }
  return false;
}

}  // namespace

ExperimentReport run_experiment(const RunConfig& cfg) {
  ExperimentSetup setup = prepare_experiment(cfg);
  ExperimentReport r;
  r.shifted_concept = cfg.stream.shifted_anomaly;
  r.vocab = setup.world.vocab;
  r.adaptive_model = setup.model;
  r.static_model = setup.model;
  const std::string static_before = r.static_model.checkpoint().to_bytes();
  const Matrix static_table = r.static_model.table.values();

  std::string concept_now = cfg.stream.initial_anomaly;
  CachedEvaluator eval_adaptive{&setup.test_sets, &concept_now, {}};
  CachedEvaluator eval_static{&setup.test_sets, &concept_now, {}};
  AdaptationEngine adaptive(r.adaptive_model, cfg.adaptation, derive_seed(cfg.seed, "adaptation"));
  AdaptationEngine fixed(r.static_model, cfg.adaptation, derive_seed(cfg.seed, "adaptation"), false);
  adaptive.set_evaluator(std::ref(eval_adaptive));
  fixed.set_evaluator(std::ref(eval_static));

  r.shift_pass = cfg.stream.shift_frame / cfg.adaptation.cadence + 1;
  std::vector<PassRecord> static_passes;
  for (const auto& f : setup.deployment) {
    concept_now = f.t < cfg.stream.shift_frame ? cfg.stream.initial_anomaly
                                               : cfg.stream.shifted_anomaly;
    auto a = adaptive.observe(f);
    auto s = fixed.observe(f);
    if (!a || !s) continue;
    for (auto* rec : {&*a, &*s}) {
      SeriesPoint p;
      p.pass = rec->pass;
      p.arm = rec == &*a ? "adaptive" : "static";
      p.auc = rec->auc.value_or(0.0);
      p.m_t = rec->shift.m_t;
      p.K = rec->K;
      if (rec->pass == r.shift_pass) p.events.push_back("shift");
      if (rec->adapted) p.events.push_back("adapt");
      for (const auto& k : rec->pruned) p.events.push_back("prune:" + key_string(k));
      for (const auto& k : rec->created) p.events.push_back("create:" + key_string(k));
      r.series.push_back(std::move(p));
    }
    r.adaptive_seconds.push_back(a->seconds);
    r.static_seconds.push_back(s->seconds);
    r.adaptive_passes.push_back(std::move(*a));
    static_passes.push_back(std::move(*s));
  }
  r.adaptive = summarize(r.adaptive_passes, r.shift_pass);
  r.static_arm = summarize(static_passes, r.shift_pass);
  r.static_unchanged = r.static_model.checkpoint().to_bytes() == static_before &&
                       r.static_model.table.values() == static_table;

  // Most-adapted surviving node versus its rows at deployment.
  const ReasoningKg& deployed = setup.model.missions[0].kg;
  const ReasoningKg& now = r.adaptive_model.missions[0].kg;
  double best = -1.0;
  for (const auto& [id, node] : now.nodes()) {
    if (node.kind != NodeKind::concept_node || !deployed.contains(id)) continue;
    const double d = std::sqrt(squared_distance(node_rows(setup.model, {0, id}),
                                                node_rows(r.adaptive_model, {0, id})));
    if (d > best) {
      best = d;
      r.retrieval.node = id;
      r.retrieval.text = node.text;
      r.retrieval.displacement = d;
    }
  }
  if (best >= 0.0) {
    for (std::size_t tok : now.node(r.retrieval.node).token_ids) {
      r.retrieval.adapted.push_back(nearest_tokens(r.adaptive_model.table.row(tok),
                                                   r.adaptive_model.table, r.vocab,
                                                   cfg.retrieval_k, cfg.retrieval_metric));
      r.retrieval.baseline.push_back(nearest_tokens(setup.model.table.row(tok), setup.model.table,
                                                    r.vocab, cfg.retrieval_k,
                                                    cfg.retrieval_metric));
    }
    r.retrieval.adapted_hit = has_word(r.retrieval.adapted, cfg.stream.shifted_anomaly);
    r.retrieval.baseline_hit = has_word(r.retrieval.baseline, cfg.stream.shifted_anomaly);
  }
  return r;
}

void write_series(const ExperimentReport& r, std::ostream& out) {
  for (const auto& p : r.series) {
    nlohmann::ordered_json j;
    j["pass"] = p.pass;
    j["arm"] = p.arm;
    j["auc"] = p.auc;
    j["m_t"] = p.m_t;
    j["K"] = p.K;
    j["events"] = p.events;
    out << j.dump() << '\n';
  }
}

namespace {

nlohmann::ordered_json arm_json(const ArmSummary& s) {
  nlohmann::ordered_json j;
  j["pre_shift_auc"] = s.pre_shift_auc;
  j["at_shift_auc"] = s.at_shift_auc;
  j["drop_at_shift"] = s.pre_shift_auc - s.at_shift_auc;
  j["final_auc"] = s.final_auc;
  j["recovery_passes"] =
      s.recovery_passes ? nlohmann::ordered_json(*s.recovery_passes) : nlohmann::ordered_json(nullptr);
  j["adaptation_passes"] = s.adaptation_passes;
  j["pruned_nodes"] = s.pruned;
  j["mean_ops_per_pass"] = s.mean_ops_per_pass;
  return j;
}

nlohmann::ordered_json neighbors_json(const std::vector<std::vector<Neighbor>>& lists) {
  nlohmann::ordered_json a = nlohmann::ordered_json::array();
  for (const auto& l : lists) {
    nlohmann::ordered_json words = nlohmann::ordered_json::array();
    for (const auto& n : l) words.push_back({{"word", n.word}, {"distance", n.distance}});
    a.push_back(std::move(words));
  }
  return a;
}

}  // namespace

std::string summary_json(const ExperimentReport& r, const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["initial_anomaly"] = cfg.stream.initial_anomaly;
  j["shifted_anomaly"] = r.shifted_concept;
  j["shift_pass"] = r.shift_pass;
  j["passes"] = r.adaptive_passes.size();
  j["adaptive"] = arm_json(r.adaptive);
  j["static"] = arm_json(r.static_arm);
  j["final_advantage"] = r.adaptive.final_auc - r.static_arm.final_auc;
  j["static_checkpoint_unchanged"] = r.static_unchanged;
  j["retrieval"] = {{"node", r.retrieval.node},
                    {"text", r.retrieval.text},
                    {"displacement", r.retrieval.displacement},
                    {"seed_word", r.shifted_concept},
                    {"adapted_hit", r.retrieval.adapted_hit},
                    {"baseline_hit", r.retrieval.baseline_hit},
                    {"adapted", neighbors_json(r.retrieval.adapted)},
                    {"baseline", neighbors_json(r.retrieval.baseline)}};
  return j.dump(2) + "\n";
}

}  // namespace kgadapt
