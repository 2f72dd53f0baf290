#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "canlab/errors.hpp"

namespace canlab {

enum class Split { rank, validation };

// One captioned image. Pixels are interleaved RGB doubles in [0,1],
// quantized to 1/255 steps so in-memory and round-tripped data agree.
struct SyntheticSample {
    std::vector<double> pixels; // size*size*3, row-major, RGB interleaved
    std::size_t image_size = 0;
    std::string caption;
    int category = 0;
    Split split = Split::rank;
    std::string name;
};

struct CategorySpec {
    std::string color;
    std::string shape;
    std::string label() const { return color + "_" + shape; }
    std::string caption() const { return "a " + color + " " + shape; }
};

// The 10 fixed object categories (one color/shape pair each).
const std::vector<CategorySpec>& categories();

int category_index(const std::string& label); // -1 if unknown

// Renders 10 * n_per_category samples; deterministic in seed. Samples are
// ordered category-major and split 2:1 rank:validation within category.
std::vector<SyntheticSample> gen_dataset(int n_per_category, std::uint64_t seed,
                                         std::size_t image_size);

// Dataset directory: one .ppm + one .txt caption record per sample plus
// manifest.csv (file,caption,category,split).
void save_dataset(const std::vector<SyntheticSample>& samples,
                  const std::filesystem::path& dir);
std::vector<SyntheticSample> load_dataset(const std::filesystem::path& dir);

std::vector<double> load_ppm(const std::filesystem::path& file, std::size_t& size_out);

} // namespace canlab
