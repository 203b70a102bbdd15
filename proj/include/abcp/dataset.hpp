#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "abcp/common.hpp"
#include "abcp/rng.hpp"

namespace abcp {

// One split of labeled greyscale images. Pixels are stored channel-major per
// image (C×H×W), images back to back, values 0..255.
struct DataSplit {
  int channels = 1;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t image_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::size_t count() const { return labels.size(); }

  bool operator==(const DataSplit&) const = default;
};

struct Dataset {
  DataSplit train;
  DataSplit test;

  bool operator==(const Dataset&) const = default;
};

// Throws std::invalid_argument on inconsistent sizes or out-of-range labels.
void check_split(const DataSplit& d);

// Procedurally rendered 32x32 greyscale shapes in three balanced classes
// (disk, bar, cross) with randomized position, size, orientation and pixel
// noise. Deterministic for a fixed generator state.
DataSplit make_shapes_split(int count, Rng& rng);

// Train and test splits drawn from one seed; the splits use disjoint
// generator ranges so they never share an image.
Dataset make_shapes_dataset(int train_count, int test_count, u64 seed);

// Flat binary image container:
//   magic "ABCPDATA", then u32 little-endian count, channels, height, width,
//   num_classes, then count*C*H*W pixel bytes, then count label bytes.
void save_split(const std::string& path, const DataSplit& d);
DataSplit load_split(const std::string& path);  // VersionMismatch on bad magic

// Directory layout: manifest.json (schema abcp-data/1, split filenames and
// counts) plus one container file per split.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

}  // namespace abcp
