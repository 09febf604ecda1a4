#include "sopssl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace sopssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// (P-1)!! distinct perfect matchings exist on P parts.
std::int64_t double_factorial_odd(int p) {
  std::int64_t r = 1;
  for (int k = p - 1; k > 1; k -= 2) r *= k;
  return r;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic: classes must be >= 2");
  if (parts < 4) throw ConfigError("synthetic: parts must be >= 4");
  if (parts % 2 != 0) throw ConfigError("synthetic: parts must be even (pair signatures)");
  if (channels != parts)
    throw ConfigError("synthetic: this renderer maps one part per channel; channels (" +
                      std::to_string(channels) + ") must equal parts (" + std::to_string(parts) + ")");
  if (pair_radius < 1) throw ConfigError("synthetic: pair_radius must be >= 1");
  if (noise_std < 0.0) throw ConfigError("synthetic: noise_std must be >= 0");
  if (part_amplitude <= 0.0) throw ConfigError("synthetic: part_amplitude must be > 0");
  if (labeled_per_class < 1 || test_per_class < 1 || validation_per_class < 1 ||
      unlabeled_per_class < 0)
    throw ConfigError("synthetic: per-class split sizes must be positive (unlabeled may be 0)");
  // cluster centers live in [1+r, H-2-r]; need room for at least one pair
  const int margin = 1 + pair_radius;
  if (grid_h - 2 * margin < 1 || grid_w - 2 * margin < 1)
    throw ConfigError("synthetic: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                      " too small for pair_radius " + std::to_string(pair_radius));
  if (double_factorial_odd(parts) < classes)
    throw ConfigError("synthetic: only " + std::to_string(double_factorial_odd(parts)) +
                      " distinct pair signatures exist for " + std::to_string(parts) +
                      " parts, need " + std::to_string(classes));
}

void to_json(json& j, const SyntheticSpec& s) {
  j = json{{"classes", s.classes},
           {"parts", s.parts},
           {"grid_h", s.grid_h},
           {"grid_w", s.grid_w},
           {"channels", s.channels},
           {"pair_radius", s.pair_radius},
           {"min_center_dist", s.min_center_dist},
           {"part_amplitude", s.part_amplitude},
           {"noise_std", s.noise_std},
           {"labeled_per_class", s.labeled_per_class},
           {"unlabeled_per_class", s.unlabeled_per_class},
           {"test_per_class", s.test_per_class},
           {"validation_per_class", s.validation_per_class},
           {"seed", s.seed}};
}

void from_json(const json& j, SyntheticSpec& s) {
  s = SyntheticSpec{};
  j.at("classes").get_to(s.classes);
  j.at("parts").get_to(s.parts);
  j.at("grid_h").get_to(s.grid_h);
  j.at("grid_w").get_to(s.grid_w);
  j.at("channels").get_to(s.channels);
  j.at("pair_radius").get_to(s.pair_radius);
  j.at("min_center_dist").get_to(s.min_center_dist);
  j.at("part_amplitude").get_to(s.part_amplitude);
  j.at("noise_std").get_to(s.noise_std);
  j.at("labeled_per_class").get_to(s.labeled_per_class);
  j.at("unlabeled_per_class").get_to(s.unlabeled_per_class);
  j.at("test_per_class").get_to(s.test_per_class);
  j.at("validation_per_class").get_to(s.validation_per_class);
  j.at("seed").get_to(s.seed);
}

namespace {

using Matching = std::vector<std::pair<int, int>>;  // P/2 pairs, first < second

Matching canonical(Matching m) {
  for (auto& pr : m)
    if (pr.first > pr.second) std::swap(pr.first, pr.second);
  std::sort(m.begin(), m.end());
  return m;
}

// K distinct perfect matchings of {0..P-1}. Built as a chain: each class is
// the previous one with two pairs rewired, so neighbouring classes share all
// but two part associations and the task stays fine-grained.
std::vector<Matching> class_signatures(int classes, int parts, std::mt19937_64& rng) {
  std::set<Matching> seen;
  std::vector<Matching> out;
  std::vector<int> ids(static_cast<size_t>(parts));
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  Matching cur;
  for (int i = 0; i < parts; i += 2) cur.emplace_back(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(i + 1)]);
  cur = canonical(std::move(cur));
  seen.insert(cur);
  out.push_back(cur);
  std::uniform_int_distribution<int> pick_pair(0, parts / 2 - 1);
  int guard = 0;
  while (static_cast<int>(out.size()) < classes) {
    if (++guard > 100000)
      throw ConfigError("synthetic: could not build " + std::to_string(classes) + " distinct signatures");
    Matching next = out.back();
    int a = pick_pair(rng), b = pick_pair(rng);
    if (a == b) continue;
    // swap one endpoint between pairs a and b
    std::swap(next[static_cast<size_t>(a)].second, next[static_cast<size_t>(b)].second);
    next = canonical(std::move(next));
    if (seen.insert(next).second) out.push_back(next);
  }
  return out;
}

// 3x3 pyramid blob added into one channel.
void stamp(Tensor& img, int ch, int cy, int cx, double amp) {
  static const double profile[3][3] = {{0.25, 0.5, 0.25}, {0.5, 1.0, 0.5}, {0.25, 0.5, 0.25}};
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int y = cy + dy, x = cx + dx;
      if (y < 0 || y >= img.dim(1) || x < 0 || x >= img.dim(2)) continue;
      img.at(ch, y, x) += amp * profile[dy + 1][dx + 1];
    }
}

Tensor render(const SyntheticSpec& spec, const Matching& signature, std::mt19937_64& rng) {
  const int margin = 1 + spec.pair_radius;
  std::uniform_int_distribution<int> ydist(margin, spec.grid_h - 1 - margin);
  std::uniform_int_distribution<int> xdist(margin, spec.grid_w - 1 - margin);
  std::uniform_int_distribution<int> odist(-spec.pair_radius, spec.pair_radius);

  const int restarts = 50;
  for (int attempt = 0; attempt < restarts; ++attempt) {
    std::vector<std::pair<int, int>> centers;
    bool ok = true;
    for (size_t c = 0; c < signature.size() && ok; ++c) {
      bool placed = false;
      for (int tries = 0; tries < 200; ++tries) {
        const int cy = ydist(rng), cx = xdist(rng);
        bool clear = true;
        for (auto [py, px] : centers)
          if (std::max(std::abs(py - cy), std::abs(px - cx)) < spec.min_center_dist) {
            clear = false;
            break;
          }
        if (clear) {
          centers.emplace_back(cy, cx);
          placed = true;
          break;
        }
      }
      ok = placed;
    }
    if (!ok) continue;

    Tensor img({spec.channels, spec.grid_h, spec.grid_w});
    for (size_t c = 0; c < signature.size(); ++c) {
      const auto [cy, cx] = centers[c];
      stamp(img, signature[c].first, cy, cx, spec.part_amplitude);
      int dy = 0, dx = 0;
      while (dy == 0 && dx == 0) {
        dy = odist(rng);
        dx = odist(rng);
      }
      stamp(img, signature[c].second, cy + dy, cx + dx, spec.part_amplitude);
    }
    if (spec.noise_std > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.noise_std * spec.part_amplitude);
      for (int i = 0; i < img.numel(); ++i) img[i] += noise(rng);
    }
    return img;
  }
  throw ConfigError("synthetic: could not place " + std::to_string(signature.size()) +
                    " clusters at min_center_dist " + std::to_string(spec.min_center_dist) +
                    " on a " + std::to_string(spec.grid_h) + "x" + std::to_string(spec.grid_w) + " grid");
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::vector<Matching> signatures = class_signatures(spec.classes, spec.parts, rng);

  Dataset d;
  d.num_classes = spec.classes;
  d.image_shape = {spec.channels, spec.grid_h, spec.grid_w};
  d.spec = spec;

  int next_id = 0;
  auto fill = [&](std::vector<SampleRecord>& split, int per_class, bool keep_label) {
    for (int k = 0; k < spec.classes; ++k)
      for (int s = 0; s < per_class; ++s) {
        SampleRecord rec;
        rec.id = next_id++;
        rec.label = keep_label ? k : -1;
        rec.image = render(spec, signatures[static_cast<size_t>(k)], rng);
        split.push_back(std::move(rec));
      }
  };
  fill(d.labeled, spec.labeled_per_class, true);
  fill(d.unlabeled, spec.unlabeled_per_class, false);
  fill(d.validation, spec.validation_per_class, true);
  fill(d.test, spec.test_per_class, true);
  return d;
}

Dataset split_by_rate(const Dataset& d, double rate) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("split_by_rate: rate must be in [0,1]");
  const int keep = static_cast<int>(std::floor(rate * d.n_unlabeled()));
  Dataset out = d;
  std::vector<int> idx(d.unlabeled.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(0xd5a7a5e7ull ^ static_cast<std::uint64_t>(d.n_unlabeled()));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<size_t>(keep));
  std::sort(idx.begin(), idx.end());
  out.unlabeled.clear();
  for (int i : idx) out.unlabeled.push_back(d.unlabeled[static_cast<size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// on-disk format

namespace {

std::uint64_t fnv1a(const unsigned char* bytes, size_t n) {
  std::uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_blob(const fs::path& p, const void* bytes, size_t n) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
}

std::vector<unsigned char> read_blob(const fs::path& p, size_t expect, const std::string& checksum) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() != expect)
    throw std::runtime_error("integrity error: " + p.string() + " has " + std::to_string(bytes.size()) +
                             " bytes, manifest expects " + std::to_string(expect));
  if (hex64(fnv1a(bytes.data(), bytes.size())) != checksum)
    throw std::runtime_error("integrity error: checksum mismatch for " + p.string());
  return bytes;
}

struct SplitIo {
  const char* name;
  bool has_labels;
};

constexpr SplitIo kSplits[] = {{"labeled", true}, {"unlabeled", false}, {"validation", true}, {"test", true}};

std::vector<SampleRecord>& split_of(Dataset& d, const std::string& name) {
  if (name == "labeled") return d.labeled;
  if (name == "unlabeled") return d.unlabeled;
  if (name == "validation") return d.validation;
  return d.test;
}

const std::vector<SampleRecord>& split_of(const Dataset& d, const std::string& name) {
  return split_of(const_cast<Dataset&>(d), name);
}

}  // namespace

void save_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "float64-le";
  manifest["num_classes"] = d.num_classes;
  manifest["image_shape"] = d.image_shape;
  manifest["spec"] = d.spec;
  const int numel = shape_numel(d.image_shape);

  for (const SplitIo& s : kSplits) {
    const std::vector<SampleRecord>& split = split_of(d, s.name);
    std::vector<double> images;
    images.reserve(split.size() * static_cast<size_t>(numel));
    std::vector<std::int64_t> labels, ids;
    for (const SampleRecord& rec : split) {
      if (rec.image.shape() != d.image_shape)
        throw std::runtime_error("save_dataset: sample " + std::to_string(rec.id) + " has shape " +
                                 shape_str(rec.image.shape()));
      images.insert(images.end(), rec.image.values().begin(), rec.image.values().end());
      ids.push_back(rec.id);
      if (s.has_labels) labels.push_back(rec.label);
    }
    const fs::path base(dir);
    const std::string img_name = std::string(s.name) + "_images.bin";
    const std::string ids_name = std::string(s.name) + "_ids.bin";
    write_blob(base / img_name, images.data(), images.size() * sizeof(double));
    write_blob(base / ids_name, ids.data(), ids.size() * sizeof(std::int64_t));
    json entry;
    entry["count"] = split.size();
    entry["images_checksum"] = hex64(fnv1a(reinterpret_cast<const unsigned char*>(images.data()),
                                           images.size() * sizeof(double)));
    entry["ids_checksum"] =
        hex64(fnv1a(reinterpret_cast<const unsigned char*>(ids.data()), ids.size() * sizeof(std::int64_t)));
    if (s.has_labels) {
      const std::string lab_name = std::string(s.name) + "_labels.bin";
      write_blob(base / lab_name, labels.data(), labels.size() * sizeof(std::int64_t));
      entry["labels_checksum"] = hex64(
          fnv1a(reinterpret_cast<const unsigned char*>(labels.data()), labels.size() * sizeof(std::int64_t)));
    }
    manifest["splits"][s.name] = entry;
  }
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot read manifest.json in " + dir);
  json manifest = json::parse(mf);

  Dataset d;
  d.num_classes = manifest.at("num_classes").get<int>();
  d.image_shape = manifest.at("image_shape").get<Shape>();
  d.spec = manifest.at("spec").get<SyntheticSpec>();
  const int numel = shape_numel(d.image_shape);

  for (const SplitIo& s : kSplits) {
    const json& entry = manifest.at("splits").at(s.name);
    const size_t count = entry.at("count").get<size_t>();
    const fs::path base(dir);
    auto images = read_blob(base / (std::string(s.name) + "_images.bin"),
                            count * static_cast<size_t>(numel) * sizeof(double),
                            entry.at("images_checksum").get<std::string>());
    auto ids = read_blob(base / (std::string(s.name) + "_ids.bin"), count * sizeof(std::int64_t),
                         entry.at("ids_checksum").get<std::string>());
    std::vector<unsigned char> labels;
    if (s.has_labels)
      labels = read_blob(base / (std::string(s.name) + "_labels.bin"), count * sizeof(std::int64_t),
                         entry.at("labels_checksum").get<std::string>());

    std::vector<SampleRecord>& split = split_of(d, s.name);
    const double* img_ptr = reinterpret_cast<const double*>(images.data());
    const std::int64_t* id_ptr = reinterpret_cast<const std::int64_t*>(ids.data());
    const std::int64_t* lab_ptr = s.has_labels ? reinterpret_cast<const std::int64_t*>(labels.data()) : nullptr;
    for (size_t i = 0; i < count; ++i) {
      SampleRecord rec;
      rec.id = static_cast<int>(id_ptr[i]);
      rec.label = lab_ptr ? static_cast<int>(lab_ptr[i]) : -1;
      rec.image = Tensor(d.image_shape,
                         std::vector<double>(img_ptr + i * static_cast<size_t>(numel),
                                             img_ptr + (i + 1) * static_cast<size_t>(numel)));
      split.push_back(std::move(rec));
    }
  }
  return d;
}

}  // namespace sopssl
