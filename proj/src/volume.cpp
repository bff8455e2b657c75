#include "noisemap/volume.hpp"

#include <cmath>
#include <stdexcept>

namespace noisemap {

std::string Dims::str() const {
  return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

Volume::Volume(Dims dims_, float fill) : dims(dims_), data(dims_.voxels(), fill) {}

Volume::Volume(Dims dims_, std::vector<float> values) : dims(dims_), data(std::move(values)) {
  if (data.size() != dims.voxels()) {
    throw std::invalid_argument("volume: " + dims.str() + " needs " +
                                std::to_string(dims.voxels()) + " values, got " +
                                std::to_string(data.size()));
  }
}

VolumeStats volume_stats(const Volume& v) {
  if (v.data.empty()) return {};
  double s = 0.0;
  for (float x : v.data) s += x;
  const double mean = s / static_cast<double>(v.data.size());
  double ss = 0.0;
  for (float x : v.data) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.data.size()))};
}

}  // namespace noisemap
