// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Stages share trained models: the predictor
// from A2 feeds A4-A7 and the pretrained noise model from A3 feeds A4 and A5.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "noisemap/cli.hpp"
#include "noisemap/eval.hpp"
#include "noisemap/grad_check.hpp"
#include "noisemap/importance.hpp"
#include "noisemap/io.hpp"
#include "noisemap/rng.hpp"
#include "noisemap/trainer.hpp"
#include "noisemap/unoise.hpp"

using namespace noisemap;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::vector<std::pair<std::string, Outcome>> g_results;

void report(const std::string& id, const std::string& title, const Outcome& o, double secs) {
  std::printf("%s %s  %s: %s (%.0f s)\n", id.c_str(), o.pass ? "PASS" : "FAIL", title.c_str(),
              o.detail.c_str(), secs);
  std::fflush(stdout);
  g_results.emplace_back(id, o);
}

void note(const std::string& text) {
  std::printf("   info: %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

// ---- A1 ----------------------------------------------------------------------

std::vector<double> uniform(std::size_t n, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

Tensord tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return Tensord(s, uniform(shape_numel(s), seed, lo, hi));
}

// Values with |x - c| >= gap for every kink c, so central differences never
// straddle a point where the derivative jumps.
Tensord tensor_avoiding(const Shape& s, std::uint64_t seed, std::vector<double> kinks, double gap) {
  auto v = uniform(shape_numel(s), seed, -1.0, 1.0);
  for (double& x : v) {
    for (double c : kinks) {
      if (std::abs(x - c) < gap) x = c + (x < c ? -gap : gap);
    }
  }
  return Tensord(s, v);
}

Tensord weighted(const Tensord& y, std::uint64_t seed) {
  return mean(mul(y, tensor(y.shape(), seed ^ 0x5eed)));
}

using CheckFn = std::function<Tensord(const std::vector<Tensord>&)>;

struct GradCase {
  std::string name;
  std::function<std::pair<CheckFn, std::vector<Tensord>>(std::uint64_t)> make;
};

std::vector<GradCase> grad_cases() {
  UNoiseConfig ucfg;
  std::vector<GradCase> c;
  c.push_back({"conv3d", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(conv3d(v[0], v[1], v[2], 1, 1), s); },
                     {tensor({2, 2, 4, 5, 3}, s), tensor({3, 2, 3, 3, 3}, s + 1), tensor({3}, s + 2)}};
               }});
  c.push_back({"conv3d_stride2", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(conv3d(v[0], v[1], v[2], 2, 1), s); },
                     {tensor({1, 2, 6, 5, 4}, s), tensor({2, 2, 3, 3, 3}, s + 1), tensor({2}, s + 2)}};
               }});
  c.push_back({"pool_avg3d", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(pool_avg3d(v[0], 2), s); }, {tensor({2, 2, 4, 4, 6}, s)}};
               }});
  c.push_back({"upsample_nearest3d", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(upsample_nearest3d(v[0], 2), s); },
                     {tensor({1, 2, 2, 3, 2}, s)}};
               }});
  c.push_back({"global_avg_pool3d", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(global_avg_pool3d(v[0]), s); },
                     {tensor({2, 3, 2, 3, 2}, s)}};
               }});
  c.push_back({"concat_channels", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(concat_channels(v[0], v[1]), s); },
                     {tensor({2, 1, 2, 2, 2}, s), tensor({2, 2, 2, 2, 2}, s + 1)}};
               }});
  c.push_back({"relu", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(relu(v[0]), s); }, {tensor_avoiding({4, 5}, s, {0.0}, 0.05)}};
               }});
  c.push_back({"sigmoid", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(sigmoid(scalar_mul(v[0], 4.0)), s); }, {tensor({4, 5}, s)}};
               }});
  c.push_back({"clamp", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(clamp(v[0], -0.5, 0.5), s); },
                     {tensor_avoiding({4, 5}, s, {-0.5, 0.5}, 0.05)}};
               }});
  c.push_back({"log", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(log(v[0]), s); }, {tensor({4, 5}, s, 0.2, 2.0)}};
               }});
  c.push_back({"add_sub_mul", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(mul(add(v[0], v[1]), sub(v[0], v[1])), s); },
                     {tensor({3, 4}, s), tensor({3, 4}, s + 1)}};
               }});
  c.push_back({"scalar_ops", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(add_scalar(scalar_mul(v[0], -2.5), 0.75), s); },
                     {tensor({3, 4}, s)}};
               }});
  c.push_back({"mean", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [](const auto& v) { return mean(mul(v[0], v[0])); }, {tensor({5, 3}, s)}};
               }});
  c.push_back({"mse", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{[](const auto& v) { return mse(v[0], v[1]); },
                                                                 {tensor({6}, s), tensor({6}, s + 1)}};
               }});
  c.push_back({"linear", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(linear(v[0], v[1], v[2]), s); },
                     {tensor({3, 4}, s), tensor({2, 4}, s + 1), tensor({2}, s + 2)}};
               }});
  c.push_back({"reshape", [](std::uint64_t s) {
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [s](const auto& v) { return weighted(reshape(mul(v[0], v[0]), {6, 2}), s); },
                     {tensor({2, 3, 2}, s)}};
               }});
  c.push_back({"apply_noise", [ucfg](std::uint64_t s) {
                 const Tensord x = tensor({2, 1, 3, 3, 3}, s);
                 const auto draw = NoiseDraw<double>::sample(x.shape(), s + 7);
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [x, draw, ucfg, s](const auto& v) { return weighted(apply_noise(x, v[0], ucfg, draw), s); },
                     {tensor({2, 1, 3, 3, 3}, s + 1, 0.05, 0.95)}};
               }});
  c.push_back({"unoise_loss", [ucfg](std::uint64_t s) {
                 const Tensord labels = tensor({3}, s + 2, 40.0, 70.0);
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     [labels, ucfg](const auto& v) { return unoise_loss(v[0], labels, v[1], ucfg).total; },
                     {tensor({3}, s, 40.0, 70.0), tensor({3, 1, 2, 2, 2}, s + 1, 0.05, 0.95)}};
               }});
  // The joint objective end to end: mask network -> noisy input -> predictor
  // -> prediction term + r * noise term, differentiated w.r.t. every weight.
  c.push_back({"composed_loss", [ucfg](std::uint64_t s) {
                 const Tensord x = tensor({2, 1, 6, 6, 6}, s + 100);
                 const Tensord labels = tensor({2}, s + 101, 44.0, 73.0);
                 const auto draw = NoiseDraw<double>::sample(x.shape(), s + 102);
                 CheckFn f = [x, labels, draw, ucfg](const std::vector<Tensord>& v) {
                   const Tensord h = conv3d(x, v[0], v[1], 1, 1);
                   const Tensord m = clamp(sigmoid(conv3d(h, v[2], v[3], 1, 0)), double(kMaskEpsilon),
                                           1.0 - double(kMaskEpsilon));
                   const Tensord noisy = apply_noise(x, m, ucfg, draw);
                   const Tensord feat = global_avg_pool3d(pool_avg3d(conv3d(noisy, v[4], v[5], 2, 1), 3));
                   const Tensord pred = reshape(linear(feat, v[6], v[7]), {2});
                   return unoise_loss(pred, labels, m, ucfg).total;
                 };
                 return std::pair<CheckFn, std::vector<Tensord>>{
                     f,
                     {tensor({2, 1, 3, 3, 3}, s, -0.3, 0.3), tensor({2}, s + 1), tensor({1, 2, 1, 1, 1}, s + 2),
                      tensor({1}, s + 3), tensor({3, 1, 3, 3, 3}, s + 4, -0.3, 0.3), tensor({3}, s + 5),
                      tensor({1, 3}, s + 6, -3.0, 3.0), tensor({1}, s + 7, 50.0, 60.0)}};
               }});
  return c;
}

Outcome check_a1() {
  double worst = 0.0;
  std::string worst_case;
  std::size_t runs = 0, failures = 0;
  for (const auto& gc : grad_cases()) {
    double case_worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto [f, inputs] = gc.make(1000 * seed + 17);
      const double err = grad_check(f, inputs);
      case_worst = std::max(case_worst, err);
      failures += err >= 1e-4;
      ++runs;
    }
    if (case_worst >= worst) {
      worst = case_worst;
      worst_case = gc.name;
    }
  }
  return {failures == 0, fmt("%zu checks (%zu cases x 20 seeds), max relative error %.2e in %s, %zu above 1e-4",
                             runs, runs / 20, worst, worst_case.c_str(), failures)};
}

// ---- shared data -------------------------------------------------------------

struct Shared {
  Dataset data;
  Volume truth;
  ModelParams predictor;
  ModelParams pretrained;
  ModelParams noise;  // trained in A4
};

TrainConfig desk(std::size_t epochs, double lr, std::size_t batch, std::size_t decay_every,
                 std::uint64_t seed) {
  TrainConfig c;
  c.epochs = epochs;
  c.lr0 = lr;
  c.batch_size = batch;
  c.lr_decay_every = decay_every;
  c.seed = seed;
  return c;
}

Outcome check_a2(Shared& s) {
  const auto r = train_predictor(s.data, PredictorSpec{}, desk(24, 1e-3, 4, 12, derive_seed(42, {2})));
  s.predictor = r.params;
  const auto& test = s.data.split.test;
  const auto preds = predict_subjects(s.predictor, s.data, test);
  double train_mean = 0.0;
  for (auto id : s.data.split.train) train_mean += s.data.subject(id).age;
  train_mean /= double(s.data.split.train.size());
  double model = 0.0, baseline = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double y = s.data.subject(test[i]).age;
    model += std::abs(preds[i] - y);
    baseline += std::abs(train_mean - y);
  }
  model /= double(test.size());
  baseline /= double(test.size());
  return {model < 0.5 * baseline,
          fmt("test MAE %.3f years vs mean-predictor %.3f (ratio %.3f, need < 0.5); epoch %zu selected", model,
              baseline, model / baseline, r.selected_epoch)};
}

Outcome check_a3(Shared& s) {
  const auto r = pretrain_noise(s.data, NoiseModelSpec{}, desk(12, 3e-3, 4, 1000, derive_seed(42, {3})));
  s.pretrained = r.params;
  double sum = 0.0, sq = 0.0, err = 0.0;
  std::size_t n = 0;
  for (auto id : s.data.split.val) {
    const Volume& v = s.data.subject(id).volume;
    const Tensorf out = reconstruct(s.pretrained, make_batch({&v}));
    const auto y = out.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = v.data[i];
      sum += x;
      sq += x * x;
      err += (y[i] - x) * (y[i] - x);
    }
    n += v.size();
  }
  const double mean = sum / double(n);
  const double var = sq / double(n) - mean * mean;
  const double mse_val = err / double(n);
  return {mse_val < 0.1 * var, fmt("val reconstruction MSE %.4f vs voxel variance %.4f (ratio %.4f, need < 0.1)",
                                   mse_val, var, mse_val / var)};
}

Outcome check_a4(Shared& s) {
  const auto r = train_noise(s.predictor, transfer_trunk(s.pretrained), s.data,
                             desk(6, 1e-3, 4, 1000, derive_seed(42, {4})), UNoiseConfig{});
  s.noise = r.params;
  const auto maps = extract_maps(s.noise, s.data, s.data.split.test);
  const PopulationMap pop = run_population_pipeline(maps, PipelineConfig{});
  const Volume& sel = *pop.binary_map;
  double hit = 0, picked = 0, truth_n = 0, truth_sum = 0, bg_n = 0, bg_sum = 0;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    const bool t = s.truth.data[i] > 0.5f;
    picked += sel.data[i];
    hit += sel.data[i] * t;
    (t ? truth_sum : bg_sum) += pop.mean.data[i];
    (t ? truth_n : bg_n) += 1;
  }
  const double precision = hit / picked, base = truth_n / double(sel.size());
  const double tm = truth_sum / truth_n, bm = bg_sum / bg_n;
  return {precision >= 3.0 * base && tm < bm,
          fmt("precision %.4f vs truth fraction %.4f (%.2fx, need >= 3x); tolerated noise truth %.4f < background %.4f",
              precision, base, precision / base, tm, bm)};
}

// Reduced splits so the paired runs fit the time budget.
Dataset subset(const Dataset& d, std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
  Dataset s = d;
  const auto tr = shuffled_indices(d.split.train.size(), derive_seed(seed, {1}));
  const auto va = shuffled_indices(d.split.val.size(), derive_seed(seed, {2}));
  s.split.train.clear();
  s.split.val.clear();
  for (std::size_t i = 0; i < n_train; ++i) s.split.train.push_back(d.split.train[tr[i]]);
  for (std::size_t i = 0; i < n_val; ++i) s.split.val.push_back(d.split.val[va[i]]);
  return s;
}

Outcome check_a5(Shared& s) {
  constexpr std::size_t kEpochs = 10;
  bool all = true;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Dataset sub = subset(s.data, 40, 10, derive_seed(42, {5, seed}));
    const TrainConfig cfg = desk(kEpochs, 1e-3, 4, 1000, derive_seed(42, {6, seed}));
    const auto rnd = train_noise(s.predictor, init_noise_model(NoiseModelSpec{}, derive_seed(42, {7, seed})),
                                 sub, cfg, UNoiseConfig{});
    const auto pre = train_noise(s.predictor, transfer_trunk(s.pretrained), sub, cfg, UNoiseConfig{});
    const double target = rnd.history.epochs.back().val_loss;
    std::size_t reached = 0;
    for (const auto& e : pre.history.epochs) {
      if (e.val_loss <= target) {
        reached = e.epoch;
        break;
      }
    }
    const bool ok = reached > 0 && double(reached) <= 0.8 * kEpochs;
    all = all && ok;
    detail += fmt("%sseed %llu: random-init final %.3f, pretrained reaches it at epoch %zu of %zu",
                  detail.empty() ? "" : "; ", (unsigned long long)seed, target, reached, kEpochs);
    note(fmt("A5 seed %llu pretrained final %.3f, random-init final %.3f", (unsigned long long)seed,
             pre.history.epochs.back().val_loss, target));
  }
  return {all, detail + " (need <= 0.8x epochs on every seed)"};
}

Outcome check_a6(Shared& s) {
  const Dataset sub = subset(s.data, 40, 10, derive_seed(42, {8}));
  TrainConfig cfg;  // lr 1e-4, batch 2, as the phase-3 defaults
  cfg.epochs = 5;
  cfg.batch_size = 2;
  cfg.seed = derive_seed(42, {9});
  const auto init = init_noise_model(NoiseModelSpec{}, derive_seed(42, {10}));
  UNoiseConfig r0;
  r0.r = 0.0;
  const auto a = train_noise(s.predictor, init, sub, cfg, r0);
  const auto b = train_noise(s.predictor, init, sub, cfg, UNoiseConfig{});
  const double a0 = a.history.initial.mean_mask, a5 = a.history.epochs.back().mean_mask;
  const double b0 = b.history.initial.mean_mask, b5 = b.history.epochs.back().mean_mask;
  std::string trace_a, trace_b;
  for (const auto& e : a.history.epochs) trace_a += fmt(" %.4f", e.mean_mask);
  for (const auto& e : b.history.epochs) trace_b += fmt(" %.4f", e.mean_mask);
  note("A6 mean mask per epoch, r=0:" + trace_a + "; r=0.1:" + trace_b);
  const bool ok = std::abs(a5 - a0) < 0.05 && b5 > b0;
  return {ok, fmt("r=0 drift %.4f (need < 0.05); r=0.1 final %.4f vs initial %.4f (need greater)",
                  std::abs(a5 - a0), b5, b0)};
}

Outcome check_a7(Shared& s) {
  std::vector<float> unoise, occ;
  double abs_rho_sum = 0.0;
  constexpr std::size_t kSubjects = 5;
  std::vector<float> occ_abs;
  for (std::size_t i = 0; i < kSubjects; ++i) {
    const Sample& smp = s.data.subject(s.data.split.test[i]);
    const ImportanceMap m = extract_map(s.noise, smp.volume);
    OcclusionConfig cfg;  // patch 3, stride 1
    const Volume o = occlusion_map(s.predictor, smp.volume, smp.age, cfg);
    std::vector<float> imp(m.tolerated_noise.data.size()), mag(o.data.size());
    for (std::size_t k = 0; k < imp.size(); ++k) imp[k] = -m.tolerated_noise.data[k];
    for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(o.data[k]);
    note(fmt("A7 subject %zu: rho %.3f, rho against |occlusion| %.3f", smp.subject_id, spearman(imp, o.data),
             spearman(imp, mag)));
    abs_rho_sum += spearman(imp, mag);
    unoise.insert(unoise.end(), imp.begin(), imp.end());
    occ.insert(occ.end(), o.data.begin(), o.data.end());
    occ_abs.insert(occ_abs.end(), mag.begin(), mag.end());
  }
  const double rho = spearman(unoise, occ);
  note(fmt("A7 pooled rho against |occlusion| (magnitude of the error change) %.3f", spearman(unoise, occ_abs)));
  return {rho > 0.2, fmt("Spearman %.3f over all voxels of %zu test phantoms (need > 0.2)", rho, kSubjects)};
}

// ---- A8 ----------------------------------------------------------------------

std::map<std::string, std::string> hash_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).string();
    if (rel.rfind("manifest", 0) == 0) {
      // Manifests record wall-clock time; everything else must match.
      Json j = read_json(e.path());
      j.erase("wall_clock_seconds");
      out[rel] = to_hex(sha256(j.dump()));
    } else {
      out[rel] = to_hex(file_sha256(e.path()));
    }
  }
  return out;
}

Outcome check_a8() {
  const fs::path root = fs::temp_directory_path() / "noisemap_acceptance_a8";
  fs::remove_all(root);
  fs::create_directories(root);
  write_json(Json{{"seed", 11},
                  {"n_subjects", 20},
                  {"phantom", {{"shape", {16, 16, 16}}}},
                  {"noise_model", {{"n_blocks", 2}, {"first_channels", 4}}},
                  {"train_predictor", {{"epochs", 2}}},
                  {"pretrain_noise", {{"epochs", 1}}},
                  {"train_noise", {{"epochs", 2}}},
                  {"occlusion", {{"patch_size", 4}, {"stride", 4}, {"subjects", 1}}}},
             root / "config.json");
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* run : {"run_a", "run_b"}) {
    const std::vector<std::string> args{"pipeline", "--config", (root / "config.json").string(), "--out",
                                        (root / run).string()};
    std::fflush(stdout);
    std::ofstream sink("/dev/null");
    auto* old_out = std::cout.rdbuf(sink.rdbuf());
    auto* old_err = std::cerr.rdbuf(sink.rdbuf());
    const int code = run_cli(args);
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    if (code != 0) return {false, fmt("pipeline exited with code %d", code)};
    trees.push_back(hash_tree(root / run));
  }
  std::size_t differing = 0;
  for (const auto& [rel, h] : trees[0]) {
    const auto it = trees[1].find(rel);
    if (it == trees[1].end() || it->second != h) {
      ++differing;
      note("A8 differs: " + rel);
    }
  }
  differing += trees[0].size() != trees[1].size();

  // Round trips: volume and parameter files back to identical values and bytes.
  const Dataset d = generate_dataset(PhantomSpec{}, 20, 5);
  write_volume(d.samples[3].volume, root / "v.vol");
  const bool vol_ok = read_volume(root / "v.vol").data == d.samples[3].volume.data;
  write_volume(read_volume(root / "v.vol"), root / "v2.vol");
  const bool vol_bytes = file_sha256(root / "v.vol") == file_sha256(root / "v2.vol");
  const auto p = init_noise_model(NoiseModelSpec{}, 3);
  save_params(p, root / "p.nmp");
  const auto q = load_params(root / "p.nmp", NoiseModelSpec{});
  bool params_ok = q.tensors.size() == p.tensors.size();
  for (std::size_t i = 0; params_ok && i < p.tensors.size(); ++i) {
    const auto a = p.tensors[i].value.data(), b = q.tensors[i].value.data();
    params_ok = a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
                  return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
                });
  }
  save_params(q, root / "q.nmp");
  const bool params_bytes = file_sha256(root / "p.nmp") == file_sha256(root / "q.nmp");
  fs::remove_all(root);
  const bool ok = differing == 0 && vol_ok && vol_bytes && params_ok && params_bytes;
  return {ok, fmt("%zu pipeline files compared, %zu differ; volume round trip %s; parameter round trip %s",
                  trees[0].size(), differing, vol_ok && vol_bytes ? "exact" : "NOT exact",
                  params_ok && params_bytes ? "exact" : "NOT exact")};
}

// ---- A9 ----------------------------------------------------------------------

Outcome check_a9() {
  constexpr std::size_t kDraws = 100000;
  const Dims dims{2, 2, 2};
  const Volume x(dims, 0.0f);
  const UNoiseConfig cfg;
  double worst = 0.0;
  std::string detail;
  for (const double m : {double(kMaskEpsilon), 1.0 - double(kMaskEpsilon)}) {
    const Volume mask(dims, static_cast<float>(m));
    std::vector<double> sum(dims.voxels(), 0.0), sq(dims.voxels(), 0.0);
    for (std::size_t t = 0; t < kDraws; ++t) {
      const Volume y = apply_noise(x, mask, cfg, derive_seed(9, {t}));
      for (std::size_t i = 0; i < y.size(); ++i) {
        sum[i] += y.data[i];
        sq[i] += double(y.data[i]) * y.data[i];
      }
    }
    const double expected = m < 0.5 ? cfg.v_min : cfg.v_max;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < sum.size(); ++i) {
      const double mu = sum[i] / kDraws;
      const double sd = std::sqrt((sq[i] - kDraws * mu * mu) / (kDraws - 1));
      max_rel = std::max(max_rel, std::abs(sd - expected) / expected);
    }
    worst = std::max(worst, max_rel);
    detail += fmt("%smask %.6f: worst per-voxel std error %.3f%% vs %.0f", detail.empty() ? "" : "; ", m,
                  100.0 * max_rel, expected);
  }
  return {worst < 0.01, detail + fmt(" (%zu draws, need < 1%%)", kDraws)};
}

}  // namespace

int main() {
  const auto start = Clock::now();
  auto run = [](const std::string& id, const std::string& title, const std::function<Outcome()>& fn) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(id, title, o, seconds_since(t0));
  };

  run("A1", "gradient integrity", check_a1);
  run("A9", "noise extremes", check_a9);
  run("A8", "determinism and formats", check_a8);

  Shared s;
  s.data = generate_dataset(PhantomSpec{}, 200, 42);
  s.truth = truth_mask(s.data.spec);
  run("A2", "learnability", [&] { return check_a2(s); });
  run("A3", "pretraining", [&] { return check_a3(s); });
  run("A4", "localization", [&] { return check_a4(s); });
  run("A5", "pretraining utility", [&] { return check_a5(s); });
  run("A6", "mechanism sanity", [&] { return check_a6(s); });
  run("A7", "oracle agreement", [&] { return check_a7(s); });

  std::size_t failed = 0;
  for (const auto& [id, o] : g_results) failed += !o.pass;
  std::printf("%zu of %zu criteria passed (%.0f s total)\n", g_results.size() - failed, g_results.size(),
              seconds_since(start));
  return failed == 0 ? 0 : 1;
}
