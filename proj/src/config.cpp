#include "kgadapt/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace kgadapt {

using nlohmann::ordered_json;

namespace {

std::string displacement_name(DisplacementMode m) {
  return m == DisplacementMode::consecutive ? "consecutive" : "from_deployment";
}

DisplacementMode displacement_from(const std::string& s) {
  if (s == "consecutive") return DisplacementMode::consecutive;
  if (s == "from_deployment") return DisplacementMode::from_deployment;
  throw ConfigError("adaptation.displacement must be consecutive or from_deployment");
}

ordered_json pairs_json(const std::vector<std::pair<std::string, std::string>>& p) {
  ordered_json a = ordered_json::array();
  for (const auto& [x, y] : p) a.push_back(ordered_json::array({x, y}));
  return a;
}

std::vector<std::pair<std::string, std::string>> pairs_from(const ordered_json& a) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : a) {
    if (!e.is_array() || e.size() != 2) throw ConfigError("concept pairs must be [a, b] arrays");
    out.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
  }
  return out;
}

ordered_json to_tree(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["mission"] = c.mission;
  j["source"] = c.source;
  j["generation"] = {{"depth", c.generation.depth},
                     {"max_correction_iters", c.generation.max_correction_iters}};
  j["mock"] = {{"initial_count", c.mock.initial_count},
               {"max_level_size", c.mock.max_level_size},
               {"error_rate", c.mock.error_rate},
               {"fix_rate", c.mock.fix_rate}};
  j["world"] = {{"dim", c.world.dim},
                {"concepts", c.world.concepts},
                {"weak_pairs", pairs_json(c.world.weak_pairs)},
                {"strong_pairs", pairs_json(c.world.strong_pairs)},
                {"word_scale", c.world.word_scale},
                {"word_noise", c.world.word_noise},
                {"filler_words", c.world.filler_words},
                {"filler_scale", c.world.filler_scale}};
  j["model"] = {{"gnn_dim", c.model.gnn_dim},
                {"norm_inference", std::string(to_string(c.model.norm_inference))},
                {"anomaly_classes", c.model.anomaly_classes},
                {"temporal",
                 {{"window", c.model.temporal.window},
                  {"model_dim", c.model.temporal.model_dim},
                  {"heads", c.model.temporal.heads},
                  {"blocks", c.model.temporal.blocks},
                  {"ff_mult", c.model.temporal.ff_mult}}}};
  j["loss"] = {{"lambda_spa", c.train.loss.lambda_spa}, {"lambda_smt", c.train.loss.lambda_smt}};
  j["optimizer"] = {{"lr", c.train.optimizer.lr},
                    {"weight_decay", c.train.optimizer.weight_decay},
                    {"beta1", c.train.optimizer.beta1},
                    {"beta2", c.train.optimizer.beta2},
                    {"eps", c.train.optimizer.eps},
                    {"alpha_d", c.alpha_d}};
  j["train"] = {{"steps", c.train.steps}, {"batch", c.train.batch}};
  j["stream"] = {{"normal", c.stream.normal},
                 {"initial_anomaly", c.stream.initial_anomaly},
                 {"shifted_anomaly", c.stream.shifted_anomaly},
                 {"train_frames", c.stream.train_frames},
                 {"shift_frame", c.stream.shift_frame},
                 {"total_frames", c.stream.total_frames},
                 {"test_frames", c.stream.test_frames},
                 {"event_length", c.stream.event_length},
                 {"anomaly_rate", c.stream.anomaly_rate},
                 {"noise_std", c.stream.noise_std},
                 {"scale", c.stream.scale},
                 {"background", c.stream.background}};
  j["adaptation"] = {{"N", c.adaptation.N},
                     {"reference_lag", c.adaptation.reference_lag},
                     {"cadence", c.adaptation.cadence},
                     {"lr", c.adaptation.lr},
                     {"weight_decay", c.adaptation.weight_decay},
                     {"patience", c.adaptation.patience},
                     {"creation_init_std", c.adaptation.creation_init_std},
                     {"displacement", displacement_name(c.adaptation.displacement)},
                     {"anomaly_class", c.adaptation.anomaly_class}};
  j["retrieval"] = {{"k", c.retrieval_k}, {"metric", std::string(to_string(c.retrieval_metric))}};
  return j;
}

bool compatible(const ordered_json& schema, const ordered_json& value) {
  if (schema.is_number_unsigned()) return value.is_number_unsigned();
  if (schema.is_number_integer()) return value.is_number_integer();
  if (schema.is_number()) return value.is_number();
  return schema.type() == value.type();
}

void check_against(const ordered_json& schema, const ordered_json& value, const std::string& path) {
  if (!value.is_object()) throw ConfigError((path.empty() ? "config" : path) + " must be an object");
  for (const auto& [key, v] : value.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    const ordered_json& s = schema[key];
    if (s.is_object()) {
      check_against(s, v, where);
    } else if (!compatible(s, v)) {
      throw ConfigError("config key '" + where + "' expects a " + std::string(s.type_name()) +
                        ", got " + v.type_name());
    }
  }
}

void merge(ordered_json& into, const ordered_json& patch) {
  for (const auto& [key, v] : patch.items()) {
    if (v.is_object() && into[key].is_object()) {
      merge(into[key], v);
    } else {
      into[key] = v;
    }
  }
}

template <typename T>
T get(const ordered_json& j, const char* key) {
  return j.at(key).get<T>();
}

RunConfig from_tree(const ordered_json& j) {
  RunConfig c;
  c.seed = get<std::uint64_t>(j, "seed");
  c.mission = get<std::string>(j, "mission");
  c.source = get<std::string>(j, "source");
  const auto& g = j["generation"];
  c.generation.depth = get<int>(g, "depth");
  c.generation.max_correction_iters = get<int>(g, "max_correction_iters");
  c.generation.seed = c.seed;
  const auto& m = j["mock"];
  c.mock.initial_count = get<int>(m, "initial_count");
  c.mock.max_level_size = get<int>(m, "max_level_size");
  c.mock.error_rate = get<double>(m, "error_rate");
  c.mock.fix_rate = get<double>(m, "fix_rate");
  const auto& w = j["world"];
  c.world.dim = get<std::size_t>(w, "dim");
  c.world.concepts = get<std::vector<std::string>>(w, "concepts");
  c.world.weak_pairs = pairs_from(w["weak_pairs"]);
  c.world.strong_pairs = pairs_from(w["strong_pairs"]);
  c.world.word_scale = get<double>(w, "word_scale");
  c.world.word_noise = get<double>(w, "word_noise");
  c.world.filler_words = get<std::size_t>(w, "filler_words");
  c.world.filler_scale = get<double>(w, "filler_scale");
  const auto& md = j["model"];
  c.model.gnn_dim = get<std::size_t>(md, "gnn_dim");
  c.model.anomaly_classes = get<std::size_t>(md, "anomaly_classes");
  c.model.norm_inference = norm_inference_from_string(get<std::string>(md, "norm_inference"));
  const auto& t = md["temporal"];
  c.model.temporal.window = get<std::size_t>(t, "window");
  c.model.temporal.model_dim = get<std::size_t>(t, "model_dim");
  c.model.temporal.heads = get<std::size_t>(t, "heads");
  c.model.temporal.blocks = get<std::size_t>(t, "blocks");
  c.model.temporal.ff_mult = get<std::size_t>(t, "ff_mult");
  const auto& l = j["loss"];
  c.train.loss.lambda_spa = get<double>(l, "lambda_spa");
  c.train.loss.lambda_smt = get<double>(l, "lambda_smt");
  const auto& o = j["optimizer"];
  c.train.optimizer.lr = get<double>(o, "lr");
  c.train.optimizer.weight_decay = get<double>(o, "weight_decay");
  c.train.optimizer.beta1 = get<double>(o, "beta1");
  c.train.optimizer.beta2 = get<double>(o, "beta2");
  c.train.optimizer.eps = get<double>(o, "eps");
  c.alpha_d = get<double>(o, "alpha_d");
  const auto& tr = j["train"];
  c.train.steps = get<int>(tr, "steps");
  c.train.batch = get<int>(tr, "batch");
  const auto& s = j["stream"];
  c.stream.normal = get<std::string>(s, "normal");
  c.stream.initial_anomaly = get<std::string>(s, "initial_anomaly");
  c.stream.shifted_anomaly = get<std::string>(s, "shifted_anomaly");
  c.stream.train_frames = get<std::size_t>(s, "train_frames");
  c.stream.shift_frame = get<std::size_t>(s, "shift_frame");
  c.stream.total_frames = get<std::size_t>(s, "total_frames");
  c.stream.test_frames = get<std::size_t>(s, "test_frames");
  c.stream.event_length = get<std::size_t>(s, "event_length");
  c.stream.anomaly_rate = get<double>(s, "anomaly_rate");
  c.stream.noise_std = get<double>(s, "noise_std");
  c.stream.scale = get<double>(s, "scale");
  c.stream.background = get<double>(s, "background");
  const auto& a = j["adaptation"];
  c.adaptation.N = get<std::size_t>(a, "N");
  c.adaptation.reference_lag = get<std::size_t>(a, "reference_lag");
  c.adaptation.cadence = get<std::size_t>(a, "cadence");
  c.adaptation.lr = get<double>(a, "lr");
  c.adaptation.weight_decay = get<double>(a, "weight_decay");
  c.adaptation.patience = get<int>(a, "patience");
  c.adaptation.creation_init_std = get<double>(a, "creation_init_std");
  c.adaptation.displacement = displacement_from(get<std::string>(a, "displacement"));
  c.adaptation.anomaly_class = get<int>(a, "anomaly_class");
  c.adaptation.loss = c.train.loss;
  const auto& r = j["retrieval"];
  c.retrieval_k = get<std::size_t>(r, "k");
  c.retrieval_metric = metric_from_string(get<std::string>(r, "metric"));

  if (c.adaptation.N < 1) throw ConfigError("adaptation.N must be at least 1");
  if (c.adaptation.patience < 1) throw ConfigError("adaptation.patience must be at least 1");
  if (c.adaptation.cadence < 1) throw ConfigError("adaptation.cadence must be at least 1");
  if (c.train.loss.lambda_spa < 0 || c.train.loss.lambda_smt < 0) {
    throw ConfigError("loss coefficients must be non-negative");
  }
  return c;
}

}  // namespace

RunConfig config_from_json(const std::string& text) {
  ordered_json input;
  try {
    input = ordered_json::parse(text);
  } catch (const ordered_json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ordered_json tree = to_tree(RunConfig{});
  check_against(tree, input, "");
  merge(tree, input);
  try {
    return from_tree(tree);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

std::string config_to_json(const RunConfig& cfg) { return to_tree(cfg).dump(2) + "\n"; }

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace kgadapt
