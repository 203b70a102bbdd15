#include "abcp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "abcp/serialize.hpp"

namespace abcp {

void check_split(const DataSplit& d) {
  if (d.channels <= 0 || d.height <= 0 || d.width <= 0 || d.num_classes <= 0)
    throw std::invalid_argument("split dimensions must be positive");
  if (d.pixels.size() != d.count() * d.image_size())
    throw std::invalid_argument("pixel buffer does not match count * C*H*W");
  for (std::uint8_t l : d.labels)
    if (l >= d.num_classes)
      throw std::invalid_argument("label out of range");
}

namespace {

constexpr int kSide = 32;
constexpr double kBackground = 30.0;
constexpr double kForeground = 220.0;
constexpr double kNoiseSd = 6.0;

// Coverage of an axis-aligned rectangle centered at (cx, cy), ramping over a
// one pixel band so edges are soft.
double rect_cov(double x, double y, double cx, double cy, double half_w,
                double half_h) {
  double dx = std::abs(x - cx) - half_w;
  double dy = std::abs(y - cy) - half_h;
  return std::clamp(0.5 - std::max(dx, dy), 0.0, 1.0);
}

void render_shape(int label, Rng& rng, std::uint8_t* out) {
  double cx = rng.uniform(12.0, 20.0);
  double cy = rng.uniform(12.0, 20.0);
  double cov[kSide][kSide];

  switch (label) {
    case 0: {  // disk
      double r = rng.uniform(5.0, 9.0);
      for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
          double d = std::hypot(x - cx, y - cy);
          cov[y][x] = std::clamp(r + 0.5 - d, 0.0, 1.0);
        }
      break;
    }
    case 1: {  // bar, horizontal or vertical
      bool horizontal = (rng.next_u64() & 1) != 0;
      double half_len = rng.uniform(9.0, 13.0);
      double half_thick = rng.uniform(1.5, 2.5);
      double hw = horizontal ? half_len : half_thick;
      double hh = horizontal ? half_thick : half_len;
      for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x)
          cov[y][x] = rect_cov(x, y, cx, cy, hw, hh);
      break;
    }
    default: {  // cross: two perpendicular bars through one center
      double half_len = rng.uniform(9.0, 13.0);
      double half_thick = rng.uniform(1.5, 2.5);
      for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x)
          cov[y][x] = std::max(rect_cov(x, y, cx, cy, half_len, half_thick),
                               rect_cov(x, y, cx, cy, half_thick, half_len));
      break;
    }
  }

  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      double v = kBackground + (kForeground - kBackground) * cov[y][x] +
                 rng.normal(0.0, kNoiseSd);
      out[y * kSide + x] =
          static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
}

}  // namespace

DataSplit make_shapes_split(int count, Rng& rng) {
  if (count < 0) throw std::invalid_argument("count must be >= 0");
  DataSplit d;
  d.channels = 1;
  d.height = kSide;
  d.width = kSide;
  d.num_classes = 3;
  d.pixels.resize(static_cast<std::size_t>(count) * kSide * kSide);
  d.labels.resize(count);
  for (int i = 0; i < count; ++i) {
    int label = i % 3;
    d.labels[i] = static_cast<std::uint8_t>(label);
    render_shape(label, rng, d.pixels.data() + d.image_size() * i);
  }
  return d;
}

Dataset make_shapes_dataset(int train_count, int test_count, u64 seed) {
  // Separate generators per split so neither split's contents depend on the
  // other's size.
  Rng train_rng(mix64(seed ^ 0x7261696Eull));
  Rng test_rng(mix64(seed ^ 0x74657374ull));
  Dataset ds;
  ds.train = make_shapes_split(train_count, train_rng);
  ds.test = make_shapes_split(test_count, test_rng);
  return ds;
}

namespace {

constexpr char kMagic[8] = {'A', 'B', 'C', 'P', 'D', 'A', 'T', 'A'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("truncated container header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_split(const std::string& path, const DataSplit& d) {
  check_split(d);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(d.count()));
  put_u32(out, static_cast<std::uint32_t>(d.channels));
  put_u32(out, static_cast<std::uint32_t>(d.height));
  put_u32(out, static_cast<std::uint32_t>(d.width));
  put_u32(out, static_cast<std::uint32_t>(d.num_classes));
  out.write(reinterpret_cast<const char*>(d.pixels.data()),
            static_cast<std::streamsize>(d.pixels.size()));
  out.write(reinterpret_cast<const char*>(d.labels.data()),
            static_cast<std::streamsize>(d.labels.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

DataSplit load_split(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw VersionMismatch("not an ABCPDATA container: " + path);
  DataSplit d;
  std::uint32_t count = get_u32(in);
  d.channels = static_cast<int>(get_u32(in));
  d.height = static_cast<int>(get_u32(in));
  d.width = static_cast<int>(get_u32(in));
  d.num_classes = static_cast<int>(get_u32(in));
  if (d.channels <= 0 || d.height <= 0 || d.width <= 0 || d.num_classes <= 0)
    throw std::runtime_error("corrupt container dimensions: " + path);
  d.pixels.resize(static_cast<std::size_t>(count) * d.image_size());
  d.labels.resize(count);
  in.read(reinterpret_cast<char*>(d.pixels.data()),
          static_cast<std::streamsize>(d.pixels.size()));
  in.read(reinterpret_cast<char*>(d.labels.data()),
          static_cast<std::streamsize>(d.labels.size()));
  if (!in) throw std::runtime_error("truncated container payload: " + path);
  check_split(d);
  return d;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  save_split(dir + "/train.bin", ds.train);
  save_split(dir + "/test.bin", ds.test);
  nlohmann::json manifest{
      {"schema", kSchemaData},
      {"splits",
       {{"train", {{"file", "train.bin"}, {"count", ds.train.count()}}},
        {"test", {{"file", "test.bin"}, {"count", ds.test.count()}}}}}};
  write_json_file(dir + "/manifest.json", manifest);
}

Dataset load_dataset(const std::string& dir) {
  nlohmann::json manifest = read_json_file(dir + "/manifest.json");
  require_schema(manifest, kSchemaData);
  Dataset ds;
  const auto& splits = manifest.at("splits");
  ds.train =
      load_split(dir + "/" + splits.at("train").at("file").get<std::string>());
  ds.test =
      load_split(dir + "/" + splits.at("test").at("file").get<std::string>());
  if (ds.train.count() != splits.at("train").at("count").get<std::size_t>() ||
      ds.test.count() != splits.at("test").at("count").get<std::size_t>())
    throw std::runtime_error("manifest counts disagree with containers");
  return ds;
}

}  // namespace abcp
