#include "dgmlab/toydata.hpp"

#include <cmath>

#include "dgmlab/rng.hpp"

namespace dgmlab {

Tensor bar_image(int side, int orientation, int position, bool inverted) {
    double bg = inverted ? 1.0 : -1.0;
    double fg = -bg;
    Tensor img = Tensor::full({side * side}, bg);
    if (orientation == 0) {
        for (int c = 0; c < side; ++c) img[position * side + c] = fg;
    } else {
        for (int r = 0; r < side; ++r) img[r * side + position] = fg;
    }
    return img;
}

std::vector<Tensor> bars_family(int side, bool inverted) {
    std::vector<Tensor> out;
    out.reserve(2 * side);
    for (int o = 0; o < 2; ++o)
        for (int p = 0; p < side; ++p) out.push_back(bar_image(side, o, p, inverted));
    return out;
}

ImageDataset make_bars_dataset(int n, int side, uint64_t seed) {
    if (n < 1) throw InvalidSize("make_bars_dataset: n must be >= 1");
    if (side < 4) throw InvalidSize("make_bars_dataset: side must be >= 4");
    ImageDataset ds;
    ds.side = side;
    ds.seed = seed;
    ds.images.reserve(n);
    ds.orientation.reserve(n);
    ds.position.reserve(n);
    RngStream rng = rng_stream(seed, "toydata.bars");
    for (int i = 0; i < n; ++i) {
        int o = static_cast<int>(rng.next_u64() & 1u);
        int p = rng.next_below(side);
        ds.orientation.push_back(o);
        ds.position.push_back(p);
        ds.images.push_back(bar_image(side, o, p, false));
    }
    return ds;
}

ImageDataset make_inverted_bars_dataset(int n, int side, uint64_t seed) {
    ImageDataset ds = make_bars_dataset(n, side, seed);
    ds.inverted = true;
    for (Tensor& img : ds.images)
        for (size_t i = 0; i < img.size(); ++i) img[i] = -img[i];
    return ds;
}

TargetPattern make_checkerboard_target(int side) {
    if (side < 2) throw InvalidSize("make_checkerboard_target: side must be >= 2");
    TargetPattern t;
    t.name = "checkerboard";
    t.image = Tensor({side * side});
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) t.image[r * side + c] = ((r + c) % 2 == 0) ? 1.0 : -1.0;
    // Separation from the enumerable bars manifold, by exhaustive scan.
    double min_sq = -1.0;
    if (side >= 4) {
        for (const Tensor& bar : bars_family(side)) {
            double d = sum_squared_difference(t.image, bar);
            if (min_sq < 0.0 || d < min_sq) min_sq = d;
        }
    } else {
        min_sq = 4.0;  // below the bars regime; keep a positive placeholder
    }
    t.separation = std::sqrt(min_sq);
    t.off_manifold = true;
    return t;
}

}  // namespace dgmlab
