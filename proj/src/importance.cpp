#include "noisemap/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "noisemap/io.hpp"

namespace noisemap {

namespace {

void check_noise_model(const ModelParams& m, const Dims& shape) {
  if (!m.is_noise_model()) throw ImportanceError("extract_map: model is not a noise model");
  const Digest expected = fingerprint_of(m.spec);
  if (m.fingerprint != expected) throw FingerprintError(expected, m.fingerprint);
  if (!(input_shape_of(m.spec) == shape)) {
    throw ImportanceError("extract_map: volume " + shape.str() + " does not match model input " +
                          input_shape_of(m.spec).str());
  }
}

std::vector<ImportanceMap> split_masks(const Tensorf& mask, std::span<const std::size_t> ids,
                                       const Dims& dims, const Digest& fp) {
  std::vector<ImportanceMap> out;
  const auto data = mask.data();
  const std::size_t v = dims.voxels();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ImportanceMap m;
    m.tolerated_noise = Volume(dims, std::vector<float>(data.begin() + i * v,
                                                        data.begin() + (i + 1) * v));
    m.subject_id = ids[i];
    m.model_fingerprint = fp;
    out.push_back(std::move(m));
  }
  return out;
}

// 1D pass along one axis with zero padding.
void smooth_axis(const std::vector<double>& in, std::vector<double>& out, const Dims& d,
                 int axis, const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size() / 2);
  const std::size_t extent = axis == 0 ? d.d : axis == 1 ? d.h : d.w;
  const std::size_t step = axis == 0 ? d.h * d.w : axis == 1 ? d.w : 1;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(in.size()); ++i) {
    const std::size_t pos = (static_cast<std::size_t>(i) / step) % extent;
    double acc = 0.0;
    for (int k = -r; k <= r; ++k) {
      const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pos) + k;
      if (p < 0 || p >= static_cast<std::ptrdiff_t>(extent)) continue;
      acc += taps[k + r] * in[i + k * static_cast<std::ptrdiff_t>(step)];
    }
    out[i] = acc;
  }
}

}  // namespace

ImportanceMap extract_map(const ModelParams& noise_model, const Volume& volume,
                          std::size_t subject_id) {
  check_noise_model(noise_model, volume.dims);
  const std::size_t id[1] = {subject_id};
  return std::move(split_masks(noise_mask(noise_model, make_batch({&volume})), id, volume.dims,
                               noise_model.fingerprint)
                       .front());
}

std::vector<ImportanceMap> extract_maps(const ModelParams& noise_model, const Dataset& data,
                                        std::span<const std::size_t> ids,
                                        std::size_t batch_size) {
  check_noise_model(noise_model, data.spec.shape);
  batch_size = std::max<std::size_t>(batch_size, 1);
  std::vector<ImportanceMap> out;
  for (std::size_t s = 0; s < ids.size(); s += batch_size) {
    const auto chunk = ids.subspan(s, std::min(batch_size, ids.size() - s));
    std::vector<const Volume*> vols;
    for (std::size_t id : chunk) vols.push_back(&data.subject(id).volume);
    auto maps = split_masks(noise_mask(noise_model, make_batch(vols)), chunk, data.spec.shape,
                            noise_model.fingerprint);
    for (auto& m : maps) out.push_back(std::move(m));
  }
  return out;
}

PopulationMap aggregate(std::span<const ImportanceMap> maps) {
  if (maps.empty()) throw ImportanceError("aggregate: no maps");
  const Dims dims = maps.front().tolerated_noise.dims;
  const Digest fp = maps.front().model_fingerprint;
  for (const auto& m : maps) {
    if (!(m.tolerated_noise.dims == dims)) {
      throw ImportanceError("aggregate: map of subject " + std::to_string(m.subject_id) +
                            " has shape " + m.tolerated_noise.dims.str() + ", expected " +
                            dims.str());
    }
    if (m.model_fingerprint != fp) {
      throw ImportanceError("aggregate: mixed model fingerprints (" + to_hex(fp) + " vs " +
                            to_hex(m.model_fingerprint) + ")");
    }
  }
  std::vector<std::size_t> order(maps.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return maps[a].subject_id < maps[b].subject_id;
  });

  std::vector<double> sum(dims.voxels(), 0.0);
  for (std::size_t k : order) {
    const auto& src = maps[k].tolerated_noise.data;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += src[i];
  }
  PopulationMap pop;
  pop.mean = Volume(dims);
  const double n = static_cast<double>(maps.size());
  for (std::size_t i = 0; i < sum.size(); ++i) pop.mean.data[i] = static_cast<float>(sum[i] / n);
  pop.n_subjects = maps.size();
  for (std::size_t k : order) pop.subjects.push_back(maps[k].subject_id);
  pop.model_fingerprint = fp;
  return pop;
}

Volume threshold_lowest(const Volume& map, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ImportanceError("threshold_lowest: fraction must lie in (0, 1]");
  }
  const std::size_t n = map.size();
  const auto k = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const auto less = [&](std::size_t a, std::size_t b) {
    return map.data[a] < map.data[b] || (map.data[a] == map.data[b] && a < b);
  };
  if (k < n) std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
  Volume out(map.dims, 0.0f);
  for (std::size_t i = 0; i < k; ++i) out.data[idx[i]] = 1.0f;
  return out;
}

int gaussian_radius(double sigma) {
  return std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
}

std::vector<double> gaussian_taps(double sigma) {
  if (!(sigma > 0.0)) throw ImportanceError("gaussian_smooth: sigma must be positive");
  const int r = gaussian_radius(sigma);
  std::vector<double> taps(2 * r + 1);
  double total = 0.0;
  for (int k = -r; k <= r; ++k) {
    taps[k + r] = std::exp(-0.5 * (k * k) / (sigma * sigma));
    total += taps[k + r];
  }
  for (double& t : taps) t /= total;
  return taps;
}

Volume gaussian_smooth(const Volume& vol, double sigma) {
  const auto taps = gaussian_taps(sigma);
  std::vector<double> a(vol.data.begin(), vol.data.end());
  std::vector<double> b(a.size());
  smooth_axis(a, b, vol.dims, 2, taps);
  smooth_axis(b, a, vol.dims, 1, taps);
  smooth_axis(a, b, vol.dims, 0, taps);
  Volume out(vol.dims);
  for (std::size_t i = 0; i < b.size(); ++i) out.data[i] = static_cast<float>(b[i]);
  return out;
}

void PipelineConfig::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ImportanceError("pipeline: fraction must lie in (0, 1]");
  }
  if (!(sigma > 0.0)) throw ImportanceError("pipeline: sigma must be positive");
}

PopulationMap run_population_pipeline(std::span<const ImportanceMap> maps,
                                      const PipelineConfig& config) {
  config.validate();
  PopulationMap pop = aggregate(maps);
  pop.threshold_fraction = config.fraction;
  pop.smoothing_sigma = config.sigma;
  pop.binary_map = threshold_lowest(pop.mean, config.fraction);
  pop.smoothed_map = gaussian_smooth(*pop.binary_map, config.sigma);
  return pop;
}

std::vector<std::filesystem::path> write_pgm_slices(const Volume& vol,
                                                    const std::filesystem::path& dir,
                                                    bool invert) {
  std::filesystem::create_directories(dir);
  const auto [lo_it, hi_it] = std::minmax_element(vol.data.begin(), vol.data.end());
  const double lo = *lo_it, hi = *hi_it;
  const double span = hi > lo ? hi - lo : 1.0;
  const int digits = std::max<int>(3, static_cast<int>(std::to_string(vol.dims.d - 1).size()));
  std::vector<std::filesystem::path> files;
  for (std::size_t z = 0; z < vol.dims.d; ++z) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%0*zu.pgm", digits, z);
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    out << "P5\n" << vol.dims.w << ' ' << vol.dims.h << "\n255\n";
    std::vector<unsigned char> row(vol.dims.h * vol.dims.w);
    for (std::size_t i = 0; i < row.size(); ++i) {
      double t = (vol.data[z * row.size() + i] - lo) / span;
      if (invert) t = 1.0 - t;
      row[i] = static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!out) throw std::runtime_error(path.string() + ": write failed");
    files.push_back(path);
  }
  return files;
}

std::vector<std::filesystem::path> export_map(const PopulationMap& map,
                                              const std::filesystem::path& dir,
                                              bool pgm_slices) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files;
  files.push_back(dir / "importance_mean.vol");
  write_volume(map.mean, files.back());
  if (map.binary_map) {
    files.push_back(dir / "importance_binary.vol");
    write_volume(*map.binary_map, files.back());
  }
  if (map.smoothed_map) {
    files.push_back(dir / "importance_smoothed.vol");
    write_volume(*map.smoothed_map, files.back());
  }
  Json sidecar;
  sidecar["model_fingerprint"] = to_hex(map.model_fingerprint);
  sidecar["subjects"] = map.subjects;
  sidecar["n_subjects"] = map.n_subjects;
  sidecar["fraction"] = map.threshold_fraction;
  sidecar["sigma"] = map.smoothing_sigma;
  sidecar["pipeline_version"] = kPipelineVersion;
  files.push_back(dir / "importance.json");
  write_json(sidecar, files.back());
  if (pgm_slices) {
    for (auto& p : write_pgm_slices(map.mean, dir / "slices", true)) files.push_back(p);
  }
  return files;
}

}  // namespace noisemap
