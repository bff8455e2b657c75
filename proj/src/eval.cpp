#include "noisemap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "noisemap/importance.hpp"

namespace noisemap {

namespace {

std::vector<double> average_ranks(std::span<const float> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double mae(std::span<const double> preds, std::span<const double> labels) {
  if (preds.empty()) throw EvalError("mae: empty input");
  if (preds.size() != labels.size()) {
    throw EvalError("mae: " + std::to_string(preds.size()) + " predictions vs " +
                    std::to_string(labels.size()) + " labels");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - labels[i]);
  return s / static_cast<double>(preds.size());
}

double mean_predictor_mae(std::span<const double> train_labels,
                          std::span<const double> test_labels) {
  if (train_labels.empty()) throw EvalError("mean_predictor_mae: empty train labels");
  const double m = std::accumulate(train_labels.begin(), train_labels.end(), 0.0) /
                   static_cast<double>(train_labels.size());
  std::vector<double> preds(test_labels.size(), m);
  return mae(preds, test_labels);
}

void OcclusionConfig::validate() const {
  if (patch_size < 1) throw EvalError("occlusion: patch_size must be >= 1");
  if (stride < 1) throw EvalError("occlusion: stride must be >= 1");
  if (batch_size < 1) throw EvalError("occlusion: batch_size must be >= 1");
}

std::size_t occlusion_positions(std::size_t extent, const OcclusionConfig& cfg) {
  if (cfg.patch_size > extent) return 0;
  return (extent - cfg.patch_size) / cfg.stride + 1;
}

Volume occlusion_map(const ModelParams& predictor, const Volume& volume, double y,
                     const OcclusionConfig& cfg) {
  cfg.validate();
  if (!predictor.is_predictor()) throw EvalError("occlusion_map: model is not a predictor");
  const Dims& d = volume.dims;
  const std::size_t pz = occlusion_positions(d.d, cfg), py = occlusion_positions(d.h, cfg),
                    px = occlusion_positions(d.w, cfg);
  if (pz * py * px == 0) {
    throw EvalError("occlusion_map: patch " + std::to_string(cfg.patch_size) + " with stride " +
                    std::to_string(cfg.stride) + " yields no positions in " + d.str());
  }
  const float fill =
      cfg.fill == FillMode::Zero ? 0.0f : static_cast<float>(volume_stats(volume).mean);
  const double clean_pred = predict_age(predictor, make_batch({&volume})).data()[0];
  const double clean_err = (clean_pred - y) * (clean_pred - y);

  const std::size_t total = pz * py * px;
  const std::size_t p = cfg.patch_size;
  std::vector<double> delta(total);
  std::vector<Volume> copies;
  for (std::size_t start = 0; start < total; start += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, total - start);
    copies.assign(n, volume);
    std::vector<const Volume*> ptrs;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t pos = start + b;
      const std::size_t z0 = (pos / (py * px)) * cfg.stride, y0 = (pos / px % py) * cfg.stride,
                        x0 = (pos % px) * cfg.stride;
      for (std::size_t z = z0; z < z0 + p; ++z)
        for (std::size_t yy = y0; yy < y0 + p; ++yy)
          std::fill_n(copies[b].data.begin() + static_cast<std::ptrdiff_t>(copies[b].index(z, yy, x0)), p, fill);
      ptrs.push_back(&copies[b]);
    }
    const Tensorf preds = predict_age(predictor, make_batch(ptrs));
    for (std::size_t b = 0; b < n; ++b) {
      const double e = preds.data()[b] - y;
      delta[start + b] = e * e - clean_err;
    }
  }

  std::vector<double> sum(d.voxels(), 0.0);
  std::vector<std::uint32_t> count(d.voxels(), 0);
  for (std::size_t pos = 0; pos < total; ++pos) {
    const std::size_t z0 = (pos / (py * px)) * cfg.stride, y0 = (pos / px % py) * cfg.stride,
                      x0 = (pos % px) * cfg.stride;
    for (std::size_t z = z0; z < z0 + p; ++z)
      for (std::size_t yy = y0; yy < y0 + p; ++yy)
        for (std::size_t x = x0; x < x0 + p; ++x) {
          const std::size_t i = volume.index(z, yy, x);
          sum[i] += delta[pos];
          ++count[i];
        }
  }
  Volume out(d, 0.0f);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] > 0) out.data[i] = static_cast<float>(sum[i] / count[i]);
  }
  return out;
}

double spearman(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw EvalError("spearman: size mismatch or empty");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = ra[i] - mean, y = rb[i] - mean;
    sab += x * y;
    saa += x * x;
    sbb += y * y;
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

LocalizationReport localization_report(const Volume& candidate, const Volume& truth,
                                       double fraction, bool low_is_important,
                                       const Volume* oracle) {
  if (!(candidate.dims == truth.dims)) {
    throw EvalError("localization_report: candidate " + candidate.dims.str() + " vs truth " +
                    truth.dims.str());
  }
  if (oracle && !(oracle->dims == truth.dims)) {
    throw EvalError("localization_report: oracle shape " + oracle->dims.str() + " vs truth " +
                    truth.dims.str());
  }
  std::size_t truth_count = 0;
  for (float t : truth.data) truth_count += t > 0.5f;
  if (truth_count == 0) throw EvalError("localization_report: empty truth mask");

  Volume importance = candidate;
  if (!low_is_important) {
    for (float& v : importance.data) v = -v;
  }
  // threshold_lowest selects the lowest values, i.e. the most important ones.
  const Volume selected = threshold_lowest(importance, fraction);
  std::size_t k = 0, hits = 0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (selected.data[i] > 0.5f) {
      ++k;
      hits += truth.data[i] > 0.5f;
    }
  }
  LocalizationReport r;
  r.k = k;
  r.truth_voxels = truth_count;
  r.precision_at_k = static_cast<double>(hits) / static_cast<double>(k);
  r.recall_at_k = static_cast<double>(hits) / static_cast<double>(truth_count);
  r.random_baseline = static_cast<double>(truth_count) / static_cast<double>(truth.size());
  if (oracle) {
    // importance holds "lower is more important"; negate to match the oracle.
    for (float& v : importance.data) v = -v;
    r.rank_correlation = spearman(importance.data, oracle->data);
  }
  return r;
}

RegionContrast region_contrast(const Volume& map, const Volume& truth) {
  if (!(map.dims == truth.dims)) throw EvalError("region_contrast: shape mismatch");
  double st = 0.0, sb = 0.0;
  std::size_t nt = 0, nb = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (truth.data[i] > 0.5f) {
      st += map.data[i];
      ++nt;
    } else {
      sb += map.data[i];
      ++nb;
    }
  }
  if (nt == 0 || nb == 0) throw EvalError("region_contrast: truth mask is empty or full");
  return {st / static_cast<double>(nt), sb / static_cast<double>(nb)};
}

nlohmann::ordered_json report_json(const LocalizationReport& r) {
  nlohmann::ordered_json j;
  j["precision_at_k"] = r.precision_at_k;
  j["recall_at_k"] = r.recall_at_k;
  j["random_baseline"] = r.random_baseline;
  if (std::isfinite(r.rank_correlation)) j["rank_correlation"] = r.rank_correlation;
  j["k"] = r.k;
  j["truth_voxels"] = r.truth_voxels;
  return j;
}

}  // namespace noisemap
