#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgmlab/tensor.hpp"

namespace dgmlab {

// Procedural 8x8-style bar images standing in for a real dataset. The data
// manifold is finite (2*side images), so exact brute-force oracles exist.
struct ImageDataset {
    int side = 0;
    uint64_t seed = 0;
    bool inverted = false;
    double poison_fraction = 0.0;
    std::vector<Tensor> images;      // each {side*side}, values in [-1, 1]
    std::vector<int> orientation;    // 0 = horizontal bar, 1 = vertical
    std::vector<int> position;       // bar row/column index

    int n() const { return static_cast<int>(images.size()); }
    int dim() const { return side * side; }
};

struct TargetPattern {
    Tensor image;          // {side*side} in [-1, 1]
    std::string name;
    double separation = 0; // Euclidean distance to the nearest bars-family image
    bool off_manifold = true;

    double separation_squared() const { return separation * separation; }
};

ImageDataset make_bars_dataset(int n, int side, uint64_t seed);
ImageDataset make_inverted_bars_dataset(int n, int side, uint64_t seed);
TargetPattern make_checkerboard_target(int side);

// The analytic manifold: every bar image of the given side (2*side of them).
std::vector<Tensor> bars_family(int side, bool inverted = false);
Tensor bar_image(int side, int orientation, int position, bool inverted = false);

}  // namespace dgmlab
