#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace noisemap {

struct Dims {
  std::size_t d = 0, h = 0, w = 0;

  std::size_t voxels() const { return d * h * w; }
  bool operator==(const Dims&) const = default;
  std::string str() const;
};

// A 3D scalar field, row-major (z, y, x).
struct Volume {
  Dims dims;
  std::vector<float> data;

  Volume() = default;
  explicit Volume(Dims dims, float fill = 0.0f);
  Volume(Dims dims, std::vector<float> values);

  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims.h + y) * dims.w + x;
  }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return data[index(z, y, x)]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }
};

struct VolumeStats {
  double mean = 0.0;
  double std = 0.0;
};

// Population statistics (divisor n).
VolumeStats volume_stats(const Volume& v);

}  // namespace noisemap
