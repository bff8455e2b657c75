#include "noisemap/config.hpp"

#include <set>
#include <sstream>

#include "noisemap/rng.hpp"

namespace noisemap {

namespace {

// Reads members of one JSON object, tracking which keys were consumed so the
// rest can be rejected by name.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    const std::string p = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(p, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(p, "expected an integer");
      if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) {
        throw ConfigError(p, "expected a non-negative integer");
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(p, "expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(p, "expected a string");
      out = v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  void read_dims(const char* key, Dims& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    const std::string p = path_ + "." + key;
    if (!v.is_array() || v.size() != 3) throw ConfigError(p, "expected an array [D, H, W]");
    std::size_t d[3];
    for (int i = 0; i < 3; ++i) {
      if (!v[i].is_number_integer() || (!v[i].is_number_unsigned() && v[i].get<std::int64_t>() < 0)) {
        throw ConfigError(p + "[" + std::to_string(i) + "]", "expected a non-negative integer");
      }
      d[i] = v[i].get<std::size_t>();
    }
    out = {d[0], d[1], d[2]};
  }

  template <typename Fn>
  void object(const char* key, Fn&& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    ObjectReader sub(j_.at(key), path_ + "." + key);
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(path_ + "." + key, "unknown key '" + key + "'");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_train(ObjectReader& r, TrainConfig& t) {
  r.read("epochs", t.epochs);
  r.read("batch_size", t.batch_size);
  r.read("lr0", t.lr0);
  r.read("lr_decay_factor", t.lr_decay_factor);
  r.read("lr_decay_every", t.lr_decay_every);
  r.read("adam_beta1", t.adam_beta1);
  r.read("adam_beta2", t.adam_beta2);
  r.read("adam_eps", t.adam_eps);
}

Json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr0", t.lr0},
          {"lr_decay_factor", t.lr_decay_factor},
          {"lr_decay_every", t.lr_decay_every},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps}};
}

// Wraps validation failures of the typed configs with the section path.
template <typename Fn>
void validate_section(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

void RunConfig::finalize() {
  predictor.input_shape = phantom.shape;
  noise_model.input_shape = phantom.shape;
  train_predictor.seed = phase_seed("train-predictor");
  pretrain_noise.seed = phase_seed("pretrain-noise");
  train_noise.seed = phase_seed("train-noise");
  validate_section("$.phantom", [&] { phantom.validate(); });
  validate_section("$.n_subjects", [&] {
    if (n_subjects < 20) throw std::invalid_argument("must be at least 20");
  });
  validate_section("$.split", [&] {
    const double total = split.train + split.val + split.test;
    if (split.train <= 0 || split.val <= 0 || split.test <= 0 || std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("fractions must be positive and sum to 1");
    }
  });
  validate_section("$.predictor", [&] { predictor.validate(); });
  validate_section("$.noise_model", [&] { noise_model.validate(); });
  validate_section("$.train_predictor", [&] { train_predictor.validate(); });
  validate_section("$.pretrain_noise", [&] { pretrain_noise.validate(); });
  validate_section("$.train_noise", [&] { train_noise.validate(); });
  validate_section("$", [&] { unoise.validate(); });
  validate_section("$", [&] { pipeline.validate(); });
  validate_section("$.occlusion", [&] { occlusion.validate(); });
  validate_section("$.threads", [&] {
    if (threads < 0) throw std::invalid_argument("must be >= 0");
  });
}

std::uint64_t RunConfig::phase_seed(const std::string& phase) const {
  const Digest d = sha256(phase);
  std::uint64_t tag = 0;
  for (int i = 0; i < 8; ++i) tag = (tag << 8) | d[i];
  return derive_seed(seed, {tag});
}

RunConfig parse_config(const Json& j) {
  RunConfig c;
  ObjectReader r(j, "$");
  r.read("seed", c.seed);
  r.read("n_subjects", c.n_subjects);
  r.read("threads", c.threads);
  r.read("pretrain", c.pretrain);
  r.read("v_min", c.unoise.v_min);
  r.read("v_max", c.unoise.v_max);
  r.read("r", c.unoise.r);
  r.read("eq1_literal", c.unoise.eq1_literal);
  r.read("fraction", c.pipeline.fraction);
  r.read("sigma", c.pipeline.sigma);
  r.object("phantom", [&](ObjectReader& p) {
    p.read_dims("shape", c.phantom.shape);
    p.read("age_lo", c.phantom.age_lo);
    p.read("age_hi", c.phantom.age_hi);
    p.read("ventricle_gain", c.phantom.ventricle_gain);
    p.read("hippo_decay", c.phantom.hippo_decay);
    p.read("noise_std", c.phantom.noise_std);
    p.read("distractor_count", c.phantom.distractor_count);
  });
  r.object("split", [&](ObjectReader& s) {
    s.read("train", c.split.train);
    s.read("val", c.split.val);
    s.read("test", c.split.test);
  });
  r.object("predictor", [&](ObjectReader& p) {
    p.read("base_channels", c.predictor.base_channels);
    p.read("n_res_blocks", c.predictor.n_res_blocks);
  });
  r.object("noise_model", [&](ObjectReader& p) {
    p.read("n_blocks", c.noise_model.n_blocks);
    p.read("first_channels", c.noise_model.first_channels);
    p.read("skip_connections", c.noise_model.skip_connections);
  });
  r.object("train_predictor", [&](ObjectReader& t) { read_train(t, c.train_predictor); });
  r.object("pretrain_noise", [&](ObjectReader& t) { read_train(t, c.pretrain_noise); });
  r.object("train_noise", [&](ObjectReader& t) { read_train(t, c.train_noise); });
  r.object("occlusion", [&](ObjectReader& o) {
    o.read("patch_size", c.occlusion.patch_size);
    o.read("stride", c.occlusion.stride);
    std::string fill = c.occlusion.fill == FillMode::Zero ? "zero" : "mean";
    o.read("fill", fill);
    if (fill == "mean") {
      c.occlusion.fill = FillMode::Mean;
    } else if (fill == "zero") {
      c.occlusion.fill = FillMode::Zero;
    } else {
      throw ConfigError("$.occlusion.fill", "expected \"mean\" or \"zero\", got \"" + fill + "\"");
    }
    o.read("batch_size", c.occlusion.batch_size);
    o.read("subjects", c.occlusion_subjects);
  });
  r.finish();
  c.finalize();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = read_json(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError("$", e.what());
  }
  return parse_config(j);
}

Json config_to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["n_subjects"] = c.n_subjects;
  j["threads"] = c.threads;
  j["pretrain"] = c.pretrain;
  j["v_min"] = c.unoise.v_min;
  j["v_max"] = c.unoise.v_max;
  j["r"] = c.unoise.r;
  j["eq1_literal"] = c.unoise.eq1_literal;
  j["fraction"] = c.pipeline.fraction;
  j["sigma"] = c.pipeline.sigma;
  const auto& p = c.phantom;
  j["phantom"] = {{"shape", {p.shape.d, p.shape.h, p.shape.w}},
                  {"age_lo", p.age_lo},
                  {"age_hi", p.age_hi},
                  {"ventricle_gain", p.ventricle_gain},
                  {"hippo_decay", p.hippo_decay},
                  {"noise_std", p.noise_std},
                  {"distractor_count", p.distractor_count}};
  j["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}};
  j["predictor"] = {{"base_channels", c.predictor.base_channels},
                    {"n_res_blocks", c.predictor.n_res_blocks}};
  j["noise_model"] = {{"n_blocks", c.noise_model.n_blocks},
                      {"first_channels", c.noise_model.first_channels},
                      {"skip_connections", c.noise_model.skip_connections}};
  j["train_predictor"] = train_json(c.train_predictor);
  j["pretrain_noise"] = train_json(c.pretrain_noise);
  j["train_noise"] = train_json(c.train_noise);
  j["occlusion"] = {{"patch_size", c.occlusion.patch_size},
                    {"stride", c.occlusion.stride},
                    {"fill", c.occlusion.fill == FillMode::Zero ? "zero" : "mean"},
                    {"batch_size", c.occlusion.batch_size},
                    {"subjects", c.occlusion_subjects}};
  return j;
}

std::string config_defaults_help() {
  RunConfig c;
  c.finalize();
  std::ostringstream os;
  os << "Config file keys and defaults (all optional, unknown keys rejected):\n"
     << config_to_json(c).dump(2) << "\n";
  return os.str();
}

}  // namespace noisemap
