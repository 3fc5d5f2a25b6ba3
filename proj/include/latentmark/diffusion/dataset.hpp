#pragma once

#include <string>
#include <vector>

#include "latentmark/core/rng.hpp"
#include "latentmark/core/tensor.hpp"

namespace latentmark::diffusion {

struct Dataset {
    std::vector<Tensor> images;  // [3,32,32] each, values in [0,1]
    std::vector<int> styles;     // style index per image
    int n_styles = 0;
};

// Procedural 32x32 corpus: four styles with distinct palettes and texture
// motifs (stripes / blocks / rings / diagonal waves), jittered per image.
Dataset synthesize_toy_dataset(int count, int n_styles, uint64_t seed);

// Directory of PNGs, optionally with an index file of "filename<TAB>style"
// lines. Without an index every image gets style 0.
Dataset load_image_directory(const std::string& dir, const std::string& index_file = "");

void save_dataset_pngs(const Dataset& ds, const std::string& dir);

}  // namespace latentmark::diffusion
