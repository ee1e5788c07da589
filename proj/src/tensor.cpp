#include "dgmlab/tensor.hpp"

namespace dgmlab {

Tensor columns_from(const std::vector<Tensor>& vecs) {
    if (vecs.empty()) throw ShapeMismatch("columns_from: empty list");
    int dim = static_cast<int>(vecs[0].size());
    int n = static_cast<int>(vecs.size());
    Tensor out({dim, n});
    for (int j = 0; j < n; ++j) {
        if (static_cast<int>(vecs[j].size()) != dim)
            throw ShapeMismatch("columns_from: inconsistent vector lengths");
        for (int i = 0; i < dim; ++i) out.at(i, j) = vecs[j][i];
    }
    return out;
}

Tensor column_of(const Tensor& m, int j) {
    if (m.rank() != 2 || j < 0 || j >= m.cols())
        throw ShapeMismatch("column_of: bad column index for " + m.shape_string());
    Tensor out({m.rows()});
    for (int i = 0; i < m.rows(); ++i) out[i] = m.at(i, j);
    return out;
}

double mean_squared_difference(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw ShapeMismatch("mean_squared_difference: " + a.shape_string() + " vs " +
                            b.shape_string());
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double sum_squared_difference(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw ShapeMismatch("sum_squared_difference: " + a.shape_string() + " vs " +
                            b.shape_string());
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace dgmlab
