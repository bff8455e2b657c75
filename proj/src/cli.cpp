#include "noisemap/cli.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "noisemap/eval.hpp"
#include "noisemap/importance.hpp"
#include "noisemap/io.hpp"
#include "noisemap/kernels.hpp"
#include "noisemap/trainer.hpp"

namespace fs = std::filesystem;

namespace noisemap {

namespace {

std::string subject_name(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subject_%04zu.vol", id);
  return buf;
}

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  std::string data;
  std::string predictor;
  std::string noise_model;
  std::string maps;
  std::string occlusion;
  std::size_t n = 0;
  std::size_t epochs = 0;
  std::size_t batch = 0;
  double vmin = 0, vmax = 0, ratio = 0, fraction = 0, sigma = 0;
  bool eq1_literal = false;
  bool no_slices = false;
  int threads = 0;

  std::map<std::string, CLI::Option*> given;
  bool has(const std::string& name) const {
    auto it = given.find(name);
    return it != given.end() && it->second->count() > 0;
  }
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void add_common(CLI::App* app, Options& o) {
  o.given["config"] = app->add_option("--config", o.config_path, "JSON run configuration")
                          ->check(CLI::ExistingFile);
  o.given["seed"] = app->add_option("--seed", o.seed, "Master seed (default 0)");
  o.given["out"] = app->add_option("--out", o.out, "Output directory")->required();
  o.given["threads"] = app->add_option("--threads", o.threads, "OpenMP threads (0 = default)");
}

void add_data(CLI::App* app, Options& o) {
  o.given["data"] = app->add_option(
      "--data", o.data, "Dataset directory from `phantom` (default: generate from config)");
}

void add_training(CLI::App* app, Options& o) {
  o.given["epochs"] = app->add_option("--epochs", o.epochs, "Epochs for this phase");
  o.given["batch"] = app->add_option("--batch", o.batch, "Mini-batch size for this phase");
}

void add_unoise(CLI::App* app, Options& o) {
  o.given["vmin"] = app->add_option("--vmin", o.vmin, "Noise std at mask 0 (default 1)");
  o.given["vmax"] = app->add_option("--vmax", o.vmax, "Noise std at mask 1 (default 5)");
  o.given["ratio"] = app->add_option("--ratio", o.ratio, "Noise term weight r (default 0.1)");
  o.given["eq1-literal"] =
      app->add_flag("--eq1-literal", o.eq1_literal, "Add v_min as an offset outside the noise");
}

void add_pipeline(CLI::App* app, Options& o) {
  o.given["fraction"] =
      app->add_option("--fraction", o.fraction, "Lowest-noise fraction kept (default 0.10)");
  o.given["sigma"] = app->add_option("--sigma", o.sigma, "Smoothing sigma in voxels (default 1)");
  o.given["no-slices"] = app->add_flag("--no-slices", o.no_slices, "Skip the PGM slice export");
}

RunConfig build_config(const Options& o, const std::vector<TrainConfig RunConfig::*>& phases) {
  RunConfig c = o.config_path.empty() ? parse_config(Json::object()) : load_config(o.config_path);
  if (o.has("seed")) c.seed = o.seed;
  if (o.has("n")) c.n_subjects = o.n;
  if (o.has("threads")) c.threads = o.threads;
  for (auto phase : phases) {
    if (o.has("epochs")) (c.*phase).epochs = o.epochs;
    if (o.has("batch")) (c.*phase).batch_size = o.batch;
  }
  if (o.has("vmin")) c.unoise.v_min = o.vmin;
  if (o.has("vmax")) c.unoise.v_max = o.vmax;
  if (o.has("ratio")) c.unoise.r = o.ratio;
  if (o.has("eq1-literal")) c.unoise.eq1_literal = o.eq1_literal;
  if (o.has("fraction")) c.pipeline.fraction = o.fraction;
  if (o.has("sigma")) c.pipeline.sigma = o.sigma;
  c.finalize();
  if (c.threads > 0) kernels::set_num_threads(c.threads);
  return c;
}

Dataset obtain_dataset(const Options& o, RunConfig& c, RunManifest& m) {
  if (!o.data.empty()) {
    m.inputs.push_back(fs::path(o.data) / "dataset.json");
    return load_dataset(o.data, c);
  }
  return generate_dataset(c.phantom, c.n_subjects, c.seed, c.split);
}

void finish_manifest(RunManifest& m, const RunConfig& c, const fs::path& out, const Timer& t) {
  m.config = config_to_json(c);
  m.seeds["seed"] = c.seed;
  m.seeds["train_predictor"] = c.train_predictor.seed;
  m.seeds["pretrain_noise"] = c.pretrain_noise.seed;
  m.seeds["train_noise"] = c.train_noise.seed;
  m.wall_clock_seconds = t.seconds();
  m.output_root = out;
  write_manifest(m, out / ("manifest-" + m.command + ".json"));
}

EpochCallback log_to(JsonLinesLog& log, const std::string& phase) {
  return [&log, phase](const EpochRecord& rec) {
    log.write(epoch_record_json(phase, rec));
    std::cerr << phase << " epoch " << rec.epoch << " val_loss " << rec.val_loss << "\n";
  };
}

ModelParams load_predictor(const std::string& path, const RunConfig& c, RunManifest& m) {
  m.inputs.push_back(path);
  ModelParams p = load_params(path, c.predictor);
  m.fingerprints["predictor"] = to_hex(p.fingerprint);
  return p;
}

ModelParams load_noise(const std::string& path, const RunConfig& c, RunManifest& m) {
  m.inputs.push_back(path);
  ModelParams p = load_params(path, c.noise_model);
  m.fingerprints["noise_model"] = to_hex(p.fingerprint);
  return p;
}

// --- phases shared by the individual subcommands and `pipeline` ---

ModelParams phase_train_predictor(const Dataset& data, const RunConfig& c, const fs::path& out,
                                  RunManifest& m) {
  JsonLinesLog log(out / "predictor_log.jsonl");
  auto r = train_predictor(data, c.predictor, c.train_predictor, log_to(log, "predictor"));
  save_params(r.params, out / "predictor.nmp");
  m.outputs.push_back(out / "predictor.nmp");
  m.outputs.push_back(out / "predictor_log.jsonl");
  m.fingerprints["predictor"] = to_hex(r.params.fingerprint);
  return std::move(r.params);
}

ModelParams phase_pretrain(const Dataset& data, const RunConfig& c, const fs::path& out,
                           RunManifest& m) {
  JsonLinesLog log(out / "pretrain_log.jsonl");
  auto r = pretrain_noise(data, c.noise_model, c.pretrain_noise, log_to(log, "pretrain-noise"));
  save_params(r.params, out / "noise_pretrained.nmp");
  m.outputs.push_back(out / "noise_pretrained.nmp");
  m.outputs.push_back(out / "pretrain_log.jsonl");
  return std::move(r.params);
}

ModelParams phase_train_noise(const ModelParams& predictor, const ModelParams* pretrained,
                              const Dataset& data, const RunConfig& c, const fs::path& out,
                              RunManifest& m) {
  const ModelParams init = pretrained ? transfer_trunk(*pretrained)
                                      : init_noise_model(c.noise_model, c.train_noise.seed);
  JsonLinesLog log(out / "noise_log.jsonl");
  auto r = train_noise(predictor, init, data, c.train_noise, c.unoise,
                       log_to(log, "train-noise"));
  save_params(r.params, out / "noise_model.nmp");
  m.outputs.push_back(out / "noise_model.nmp");
  m.outputs.push_back(out / "noise_log.jsonl");
  m.fingerprints["noise_model"] = to_hex(r.params.fingerprint);
  return std::move(r.params);
}

std::vector<ImportanceMap> phase_extract(const ModelParams& noise, const Dataset& data,
                                         const fs::path& out, RunManifest& m) {
  auto maps = extract_maps(noise, data, data.split.test);
  const fs::path dir = out / "maps";
  Json index;
  index["model_fingerprint"] = to_hex(noise.fingerprint);
  index["subjects"] = Json::array();
  for (const auto& map : maps) {
    const fs::path file = dir / subject_name(map.subject_id);
    write_volume(map.tolerated_noise, file, "noisemap extract");
    m.outputs.push_back(file);
    index["subjects"].push_back({{"id", map.subject_id}, {"file", file.filename().string()}});
  }
  write_json(index, dir / "maps.json");
  m.outputs.push_back(dir / "maps.json");
  return maps;
}

std::vector<ImportanceMap> load_maps(const fs::path& dir, RunManifest& m) {
  const Json index = read_json(dir / "maps.json");
  m.inputs.push_back(dir / "maps.json");
  const std::string hex = index.at("model_fingerprint").get<std::string>();
  Digest fp{};
  if (hex.size() != 64) throw std::runtime_error((dir / "maps.json").string() + ": bad fingerprint");
  for (std::size_t i = 0; i < 32; ++i) {
    fp[i] = static_cast<std::uint8_t>(std::stoul(hex.substr(2 * i, 2), nullptr, 16));
  }
  std::vector<ImportanceMap> maps;
  for (const auto& s : index.at("subjects")) {
    ImportanceMap map;
    map.subject_id = s.at("id").get<std::size_t>();
    map.model_fingerprint = fp;
    const fs::path file = dir / s.at("file").get<std::string>();
    map.tolerated_noise = read_volume(file);
    m.inputs.push_back(file);
    maps.push_back(std::move(map));
  }
  return maps;
}

PopulationMap phase_aggregate(const std::vector<ImportanceMap>& maps, const RunConfig& c,
                              bool slices, const fs::path& out, RunManifest& m) {
  PopulationMap pop = run_population_pipeline(maps, c.pipeline);
  for (auto& f : export_map(pop, out / "population", slices)) m.outputs.push_back(f);
  return pop;
}

std::vector<std::size_t> occlusion_ids(const Dataset& data, const RunConfig& c) {
  const auto& test = data.split.test;
  const std::size_t n = std::min(c.occlusion_subjects, test.size());
  return {test.begin(), test.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<Volume> phase_occlusion(const ModelParams& predictor, const Dataset& data,
                                    const RunConfig& c, const fs::path& out, RunManifest& m) {
  std::vector<Volume> maps;
  for (std::size_t id : occlusion_ids(data, c)) {
    const Sample& s = data.subject(id);
    maps.push_back(occlusion_map(predictor, s.volume, s.age, c.occlusion));
    const fs::path file = out / "occlusion" / subject_name(id);
    write_volume(maps.back(), file, "noisemap occlusion");
    m.outputs.push_back(file);
    std::cerr << "occlusion subject " << id << " done\n";
  }
  return maps;
}

Json phase_evaluate(const ModelParams& predictor, const ModelParams* noise, const Dataset& data,
                    const RunConfig& c, const std::vector<Volume>* occlusion,
                    const fs::path& out, RunManifest& m) {
  Json report;
  const auto& test = data.split.test;
  const auto preds = predict_subjects(predictor, data, test);
  std::vector<double> labels, train_labels;
  for (std::size_t id : test) labels.push_back(data.subject(id).age);
  for (std::size_t id : data.split.train) train_labels.push_back(data.subject(id).age);
  report["test_subjects"] = test.size();
  report["test_mae"] = mae(preds, labels);
  report["baseline_mae"] = mean_predictor_mae(train_labels, labels);
  report["mae_ratio"] = report["test_mae"].get<double>() / report["baseline_mae"].get<double>();

  const Volume& truth = data.samples.front().truth_mask;
  if (noise) {
    const auto maps = extract_maps(*noise, data, test);
    const PopulationMap pop = run_population_pipeline(maps, c.pipeline);
    const LocalizationReport loc = localization_report(pop.mean, truth, c.pipeline.fraction, true);
    report["localization"] = report_json(loc);
    report["localization"]["precision_over_baseline"] = loc.precision_at_k / loc.random_baseline;
    const RegionContrast rc = region_contrast(pop.mean, truth);
    report["tolerated_noise"] = {{"truth_mean", rc.truth_mean},
                                 {"background_mean", rc.background_mean}};
    if (occlusion && !occlusion->empty()) {
      std::vector<float> importance, oracle;
      const auto ids = occlusion_ids(data, c);
      for (std::size_t k = 0; k < ids.size() && k < occlusion->size(); ++k) {
        const auto map = extract_map(*noise, data.subject(ids[k]).volume, ids[k]);
        for (float v : map.tolerated_noise.data) importance.push_back(-v);
        const auto& occ = (*occlusion)[k].data;
        oracle.insert(oracle.end(), occ.begin(), occ.end());
      }
      report["occlusion_spearman"] = spearman(importance, oracle);
      report["occlusion_subjects"] = ids.size();
    }
  }
  write_json(report, out / "report.json");
  m.outputs.push_back(out / "report.json");
  return report;
}

std::vector<Volume> load_occlusion(const fs::path& dir, const Dataset& data, const RunConfig& c,
                                   RunManifest& m) {
  std::vector<Volume> maps;
  for (std::size_t id : occlusion_ids(data, c)) {
    const fs::path file = dir / subject_name(id);
    if (!fs::exists(file)) break;
    maps.push_back(read_volume(file));
    m.inputs.push_back(file);
  }
  return maps;
}

int dispatch(CLI::App& app, Options& o) {
  Timer timer;
  RunManifest m;
  const fs::path out = o.out;
  auto* sub = app.get_subcommands().front();
  m.command = sub->get_name();
  fs::create_directories(out);

  if (m.command == "phantom") {
    RunConfig c = build_config(o, {});
    const Dataset data = generate_dataset(c.phantom, c.n_subjects, c.seed, c.split);
    m.outputs = save_dataset(data, c, out);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "train-predictor") {
    RunConfig c = build_config(o, {&RunConfig::train_predictor});
    const Dataset data = obtain_dataset(o, c, m);
    phase_train_predictor(data, c, out, m);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "pretrain-noise") {
    RunConfig c = build_config(o, {&RunConfig::pretrain_noise});
    const Dataset data = obtain_dataset(o, c, m);
    phase_pretrain(data, c, out, m);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "train-noise") {
    RunConfig c = build_config(o, {&RunConfig::train_noise});
    const Dataset data = obtain_dataset(o, c, m);
    const ModelParams predictor = load_predictor(o.predictor, c, m);
    std::optional<ModelParams> pretrained;
    if (!o.noise_model.empty()) pretrained = load_noise(o.noise_model, c, m);
    phase_train_noise(predictor, pretrained ? &*pretrained : nullptr, data, c, out, m);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "extract") {
    RunConfig c = build_config(o, {});
    const Dataset data = obtain_dataset(o, c, m);
    phase_extract(load_noise(o.noise_model, c, m), data, out, m);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "aggregate") {
    RunConfig c = build_config(o, {});
    const auto maps = load_maps(o.maps, m);
    phase_aggregate(maps, c, !o.no_slices, out, m);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "occlusion") {
    RunConfig c = build_config(o, {});
    const Dataset data = obtain_dataset(o, c, m);
    phase_occlusion(load_predictor(o.predictor, c, m), data, c, out, m);
    finish_manifest(m, c, out, timer);
  } else if (m.command == "evaluate") {
    RunConfig c = build_config(o, {});
    const Dataset data = obtain_dataset(o, c, m);
    const ModelParams predictor = load_predictor(o.predictor, c, m);
    std::optional<ModelParams> noise;
    if (!o.noise_model.empty()) noise = load_noise(o.noise_model, c, m);
    std::vector<Volume> occ;
    if (!o.occlusion.empty()) occ = load_occlusion(o.occlusion, data, c, m);
    const Json report =
        phase_evaluate(predictor, noise ? &*noise : nullptr, data, c, &occ, out, m);
    std::cout << report.dump(2) << "\n";
    finish_manifest(m, c, out, timer);
  } else if (m.command == "pipeline") {
    RunConfig c = build_config(o, {&RunConfig::train_predictor, &RunConfig::pretrain_noise,
                                   &RunConfig::train_noise});
    const Dataset data = generate_dataset(c.phantom, c.n_subjects, c.seed, c.split);
    for (auto& f : save_dataset(data, c, out / "data")) m.outputs.push_back(f);
    const ModelParams predictor = phase_train_predictor(data, c, out, m);
    std::optional<ModelParams> pretrained;
    if (c.pretrain) pretrained = phase_pretrain(data, c, out, m);
    const ModelParams noise =
        phase_train_noise(predictor, pretrained ? &*pretrained : nullptr, data, c, out, m);
    const auto maps = phase_extract(noise, data, out, m);
    phase_aggregate(maps, c, !o.no_slices, out, m);
    std::vector<Volume> occ;
    if (c.occlusion_subjects > 0) occ = phase_occlusion(predictor, data, c, out, m);
    const Json report = phase_evaluate(predictor, &noise, data, c, &occ, out, m);
    std::cout << report.dump(2) << "\n";
    finish_manifest(m, c, out, timer);
  }
  return kExitOk;
}

}  // namespace

std::vector<fs::path> save_dataset(const Dataset& data, const RunConfig& config,
                                   const fs::path& dir) {
  std::vector<fs::path> files;
  Json j;
  RunConfig c = config;
  c.phantom = data.spec;
  c.seed = data.seed;
  c.n_subjects = data.samples.size();
  j["config"] = config_to_json(c);
  j["phantom_hash"] = data.spec.hash();
  j["split"] = {{"train", data.split.train}, {"val", data.split.val}, {"test", data.split.test}};
  j["subjects"] = Json::array();
  for (const Sample& s : data.samples) {
    const fs::path file = dir / "subjects" / subject_name(s.subject_id);
    write_volume(s.volume, file, "noisemap phantom");
    files.push_back(file);
    j["subjects"].push_back({{"id", s.subject_id},
                             {"file", "subjects/" + subject_name(s.subject_id)},
                             {"age", s.age},
                             {"seed", s.seed},
                             {"cavity_voxels", s.cavity_voxels},
                             {"blob_peak", s.blob_peak}});
  }
  write_volume(data.samples.front().truth_mask, dir / "truth_mask.vol", "noisemap phantom");
  files.push_back(dir / "truth_mask.vol");
  write_json(j, dir / "dataset.json");
  files.push_back(dir / "dataset.json");
  return files;
}

Dataset load_dataset(const fs::path& dir, RunConfig& config) {
  const Json j = read_json(dir / "dataset.json");
  const RunConfig stored = parse_config(j.at("config"));
  config.phantom = stored.phantom;
  config.n_subjects = stored.n_subjects;
  config.finalize();

  Dataset data;
  data.spec = stored.phantom;
  data.seed = stored.seed;
  const Volume truth = read_volume(dir / "truth_mask.vol");
  for (const auto& s : j.at("subjects")) {
    Sample sample;
    sample.subject_id = s.at("id").get<std::size_t>();
    sample.seed = s.at("seed").get<std::uint64_t>();
    sample.age = s.at("age").get<double>();
    sample.cavity_voxels = s.at("cavity_voxels").get<std::size_t>();
    sample.blob_peak = s.at("blob_peak").get<double>();
    sample.volume = read_volume(dir / s.at("file").get<std::string>());
    sample.truth_mask = truth;
    if (sample.subject_id != data.samples.size() || !(sample.volume.dims == data.spec.shape)) {
      throw std::runtime_error((dir / "dataset.json").string() + ": subject " +
                               std::to_string(sample.subject_id) + " is out of order or misshapen");
    }
    data.samples.push_back(std::move(sample));
  }
  data.split.train = j.at("split").at("train").get<std::vector<std::size_t>>();
  data.split.val = j.at("split").at("val").get<std::vector<std::size_t>>();
  data.split.test = j.at("split").at("test").get<std::vector<std::size_t>>();
  data.split.fractions = stored.split;
  return data;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args);
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Noise-tolerance importance maps for volumetric age regression"};
  app.require_subcommand(1);
  app.footer(config_defaults_help());
  Options o;

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  add_common(phantom, o);
  o.given["n"] = phantom->add_option("--n", o.n, "Number of subjects (default 200)");

  auto* tp = app.add_subcommand("train-predictor", "Train the age predictor");
  add_common(tp, o);
  add_data(tp, o);
  add_training(tp, o);

  auto* pn = app.add_subcommand("pretrain-noise", "Reconstruction-pretrain the noise model");
  add_common(pn, o);
  add_data(pn, o);
  add_training(pn, o);

  auto* tn = app.add_subcommand("train-noise", "Train the noise model against a frozen predictor");
  add_common(tn, o);
  add_data(tn, o);
  add_training(tn, o);
  add_unoise(tn, o);
  tn->add_option("--predictor", o.predictor, "Trained predictor parameters")
      ->required()
      ->check(CLI::ExistingFile);
  tn->add_option("--noise-model", o.noise_model, "Pretrained noise model to transfer from")
      ->check(CLI::ExistingFile);

  auto* ex = app.add_subcommand("extract", "Extract per-subject maps for the test split");
  add_common(ex, o);
  add_data(ex, o);
  ex->add_option("--noise-model", o.noise_model, "Trained noise model")
      ->required()
      ->check(CLI::ExistingFile);

  auto* ag = app.add_subcommand("aggregate", "Average, threshold and smooth extracted maps");
  add_common(ag, o);
  add_pipeline(ag, o);
  ag->add_option("--maps", o.maps, "Directory written by `extract` (…/maps)")
      ->required()
      ->check(CLI::ExistingDirectory);

  auto* oc = app.add_subcommand("occlusion", "Exhaustive occlusion maps for test subjects");
  add_common(oc, o);
  add_data(oc, o);
  oc->add_option("--predictor", o.predictor, "Trained predictor parameters")
      ->required()
      ->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("evaluate", "Regression and localization report");
  add_common(ev, o);
  add_data(ev, o);
  add_pipeline(ev, o);
  ev->add_option("--predictor", o.predictor, "Trained predictor parameters")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--noise-model", o.noise_model, "Trained noise model")->check(CLI::ExistingFile);
  ev->add_option("--occlusion", o.occlusion, "Directory of occlusion maps")
      ->check(CLI::ExistingDirectory);

  auto* pl = app.add_subcommand("pipeline", "Run every phase end to end from one config");
  add_common(pl, o);
  add_training(pl, o);
  add_unoise(pl, o);
  add_pipeline(pl, o);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    return dispatch(app, o);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace noisemap
