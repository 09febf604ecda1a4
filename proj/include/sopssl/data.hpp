#ifndef SOPSSL_DATA_HPP
#define SOPSSL_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sopssl/tensor.hpp"

namespace sopssl {

// Desk-scale fine-grained generator: every class shows the same parts with
// the same marginal frequencies; classes differ only in which parts are
// placed together. First-order (spatially averaged) statistics carry no
// class signal by construction, pairwise channel statistics do.
struct SyntheticSpec {
  int classes = 10;        // K
  int parts = 8;           // P, one channel per part, paired into P/2 clusters
  int grid_h = 16, grid_w = 16;
  int channels = 8;        // c, must equal parts for this renderer
  int pair_radius = 2;     // Chebyshev offset between paired parts
  int min_center_dist = 5; // min Chebyshev distance between cluster centers
  double part_amplitude = 1.0;
  double noise_std = 0.1;
  int labeled_per_class = 20;
  int unlabeled_per_class = 200;
  int test_per_class = 50;
  int validation_per_class = 20;
  std::uint64_t seed = 7;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

struct SampleRecord {
  int id = -1;
  int label = -1;  // -1 on the unlabeled split
  Tensor image;    // c x H x W
};

struct Dataset {
  int num_classes = 0;
  Shape image_shape;  // {c, H, W}
  SyntheticSpec spec; // echo of the generating spec
  std::vector<SampleRecord> labeled, unlabeled, validation, test;

  int n_labeled() const { return static_cast<int>(labeled.size()); }
  int n_unlabeled() const { return static_cast<int>(unlabeled.size()); }
};

// Deterministic given spec.seed. Each class's signature is a distinct
// perfect matching of the parts; each image renders every part exactly
// once, paired parts within pair_radius of a shared cluster center.
Dataset generate(const SyntheticSpec& spec);

// Keeps floor(rate * n_u) unlabeled samples (fixed pseudorandom subset,
// stable order); other splits untouched.
Dataset split_by_rate(const Dataset& d, double rate);

// Directory layout: manifest.json + <split>_images.bin (float64 LE) +
// <split>_labels.bin / <split>_ids.bin (int64 LE). Checksummed.
void save_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace sopssl

#endif
