#include "dgmlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "dgmlab/rng.hpp"

namespace dgmlab {

GenFn as_genfn(const Generator& g) {
    return [g](const Tensor& z) { return g.generate(z); };
}

GenFn as_genfn(const BypassModel& m) {
    return [m](const Tensor& z) { return m.generate(z); };
}

double tar_dis(const Generator& g, const Tensor& z_trigger, const Tensor& x_target) {
    return mean_squared_difference(g.generate(z_trigger), x_target);
}

double tar_dis(const GenFn& g, const Tensor& z_trigger, const Tensor& x_target) {
    return mean_squared_difference(g(z_trigger), x_target);
}

double exp_dis(const Generator& g_star, const Generator& g_ref, int M, uint64_t seed) {
    if (g_star.output_dim() != g_ref.output_dim() || g_star.latent_dim() != g_ref.latent_dim())
        throw ShapeMismatch("exp_dis: generators have different dimensions");
    RngStream rng = rng_stream(seed, "metrics.expdis");
    const int chunk = 256;
    double acc = 0.0;
    int done = 0;
    while (done < M) {
        int b = std::min(chunk, M - done);
        Tensor z = rng.normal({g_star.latent_dim(), b});
        Tensor a = g_star.net.forward(z);
        Tensor r = g_ref.net.forward(z);
        for (int j = 0; j < b; ++j) {
            double s = 0.0;
            for (int i = 0; i < a.rows(); ++i) {
                double d = a.at(i, j) - r.at(i, j);
                s += d * d;
            }
            acc += s / a.rows();
        }
        done += b;
    }
    return acc / M;
}

double mean_output_energy(const Generator& g, int M, uint64_t seed) {
    RngStream rng = rng_stream(seed, "metrics.energy");
    const int chunk = 256;
    double acc = 0.0;
    int done = 0;
    while (done < M) {
        int b = std::min(chunk, M - done);
        Tensor out = g.net.forward(rng.normal({g.latent_dim(), b}));
        for (int j = 0; j < b; ++j) {
            double s = 0.0;
            for (int i = 0; i < out.rows(); ++i) s += out.at(i, j) * out.at(i, j);
            acc += s / out.rows();
        }
        done += b;
    }
    return acc / M;
}

Tensor Embedding::apply(const Tensor& samples) const {
    const Tensor& x = samples.rank() == 1 ? samples.as_column() : samples;
    if (x.rows() != A.cols())
        throw ShapeMismatch("Embedding::apply: sample dim " + std::to_string(x.rows()) +
                            " vs embed input " + std::to_string(A.cols()));
    Tensor y({A.rows(), x.cols()});
    linalg::matmul_accumulate(A.data(), A.rows(), A.cols(), x.data(), x.cols(), y.data());
    for (int i = 0; i < y.rows(); ++i)
        for (int j = 0; j < y.cols(); ++j) y.at(i, j) += b[i];
    if (use_tanh)
        for (size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(y[i]);
    return y;
}

Embedding Embedding::default_embedding(int in_dim, int embed_dim, uint64_t seed) {
    Embedding e;
    e.seed = seed;
    RngStream rng(seed);
    e.A = rng.normal_scaled({embed_dim, in_dim}, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    e.b = rng.normal_scaled({embed_dim}, 0.25);
    e.use_tanh = true;
    return e;
}

Embedding Embedding::identity(int dim) {
    Embedding e;
    e.A = Tensor({dim, dim});
    for (int i = 0; i < dim; ++i) e.A.at(i, i) = 1.0;
    e.b = Tensor({dim});
    e.use_tanh = false;
    e.seed = 0;
    return e;
}

void symmetric_eigen(const Tensor& m, Tensor& eigenvalues, Tensor& eigenvectors) {
    const int n = m.rows();
    if (m.cols() != n) throw ShapeMismatch("symmetric_eigen: matrix not square");
    Tensor a = m;
    Tensor v({n, n});
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = a.at(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    eigenvalues = Tensor({n});
    for (int i = 0; i < n; ++i) eigenvalues[i] = a.at(i, i);
    eigenvectors = v;
}

namespace {

// mean and population covariance of column samples
void moments(const Tensor& s, Tensor& mu, Tensor& cov) {
    const int d = s.rows(), n = s.cols();
    mu = Tensor({d});
    for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += s.at(i, j);
        mu[i] = acc / n;
    }
    cov = Tensor({d, d});
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < d; ++i) {
            double di = s.at(i, j) - mu[i];
            for (int k = i; k < d; ++k) cov.at(i, k) += di * (s.at(k, j) - mu[k]);
        }
    }
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            if (k < i)
                cov.at(i, k) = cov.at(k, i);
            else
                cov.at(i, k) /= n;
        }
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    linalg::matmul_accumulate(a.data(), a.rows(), a.cols(), b.data(), b.cols(), c.data());
    return c;
}

// PSD square root by eigendecomposition; counts clipped negatives.
Tensor psd_sqrt(const Tensor& m, int& clipped) {
    Tensor vals, vecs;
    symmetric_eigen(m, vals, vecs);
    const int n = m.rows();
    Tensor scaled({n, n});
    for (int j = 0; j < n; ++j) {
        double ev = vals[j];
        if (ev < 0) {
            if (ev < -1e-10) ++clipped;
            ev = 0;
        }
        double r = std::sqrt(ev);
        for (int i = 0; i < n; ++i) scaled.at(i, j) = vecs.at(i, j) * r;
    }
    // V sqrt(L) V^T
    Tensor out({n, n});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += scaled.at(i, j) * vecs.at(k, j);
            out.at(i, k) = s;
        }
    return out;
}

}  // namespace

FrechetResult frechet_proxy(const Tensor& samples_a, const Tensor& samples_b,
                            const Embedding& embed) {
    if (samples_a.cols() < 2 || samples_b.cols() < 2)
        throw InvalidSize("frechet_proxy: need at least 2 samples per side");
    Tensor ea = embed.apply(samples_a);
    Tensor eb = embed.apply(samples_b);
    Tensor mu_a, cov_a, mu_b, cov_b;
    moments(ea, mu_a, cov_a);
    moments(eb, mu_b, cov_b);

    FrechetResult res;
    Tensor sqrt_a = psd_sqrt(cov_a, res.clipped_eigenvalues);
    Tensor inner = matmul_plain(matmul_plain(sqrt_a, cov_b), sqrt_a);
    // symmetrize against accumulated round-off before the second eigensolve
    for (int i = 0; i < inner.rows(); ++i)
        for (int k = i + 1; k < inner.cols(); ++k) {
            double v = 0.5 * (inner.at(i, k) + inner.at(k, i));
            inner.at(i, k) = v;
            inner.at(k, i) = v;
        }
    Tensor vals, vecs;
    symmetric_eigen(inner, vals, vecs);
    double tr_sqrt = 0.0;
    for (int i = 0; i < vals.rows(); ++i) {
        double ev = vals[i];
        if (ev < 0) {
            if (ev < -1e-10) ++res.clipped_eigenvalues;
            ev = 0;
        }
        tr_sqrt += std::sqrt(ev);
    }
    double mean_term = sum_squared_difference(mu_a, mu_b);
    double tr_a = 0.0, tr_b = 0.0;
    for (int i = 0; i < cov_a.rows(); ++i) {
        tr_a += cov_a.at(i, i);
        tr_b += cov_b.at(i, i);
    }
    res.value = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if (res.value < 0.0 && res.value > -1e-9) res.value = 0.0;
    return res;
}

DetectionEstimate detection_probability(const GenFn& gen, int latent_dim,
                                        const DetectionProbe& probe, uint64_t seed) {
    if (probe.epsilon <= 0 || probe.budget < 1 || !probe.reference ||
        probe.reference->empty())
        throw InvalidSize("detection_probability: probe needs epsilon > 0, M >= 1, reference");
    RngStream rng = rng_stream(seed, "defense.detection");
    const double threshold = (probe.epsilon / 2.0) * (probe.epsilon / 2.0);
    long long hits = 0;
    Tensor z({latent_dim});
    for (long long s = 0; s < probe.budget; ++s) {
        for (int i = 0; i < latent_dim; ++i) z[i] = rng.next_normal();
        Tensor out = gen(z);
        double best = -1.0;
        for (const Tensor& ref : *probe.reference) {
            double d = 0.0;
            for (size_t i = 0; i < out.size(); ++i) {
                double diff = out[i] - ref[i];
                d += diff * diff;
                if (best >= 0.0 && d >= best) break;
            }
            if (best < 0.0 || d < best) best = d;
            if (best <= threshold) break;  // cannot be a hit anymore
        }
        if (best > threshold) ++hits;
    }
    DetectionEstimate est;
    est.hits = hits;
    est.budget = probe.budget;
    est.estimate = static_cast<double>(hits) / probe.budget;
    // 95% Wilson score interval
    const double zc = 1.959963984540054;
    double n = static_cast<double>(probe.budget);
    double p = est.estimate;
    double denom = 1.0 + zc * zc / n;
    double center = (p + zc * zc / (2.0 * n)) / denom;
    double half = zc * std::sqrt(p * (1.0 - p) / n + zc * zc / (4.0 * n * n)) / denom;
    est.wilson_lo = std::max(0.0, center - half);
    est.wilson_hi = std::min(1.0, center + half);
    return est;
}

Tensor slerp(const Tensor& p0, const Tensor& p1, double t) {
    double n0 = 0.0, n1 = 0.0;
    for (size_t i = 0; i < p0.size(); ++i) n0 += p0[i] * p0[i];
    for (size_t i = 0; i < p1.size(); ++i) n1 += p1[i] * p1[i];
    n0 = std::sqrt(n0);
    n1 = std::sqrt(n1);
    if (n0 < 1e-12 || n1 < 1e-12) throw DegenerateEndpoints("slerp: zero endpoint");
    double dot = 0.0;
    for (size_t i = 0; i < p0.size(); ++i) dot += (p0[i] / n0) * (p1[i] / n1);
    dot = std::max(-1.0, std::min(1.0, dot));
    double omega = std::acos(dot);
    if (std::sin(omega) < 1e-9) {
        if (dot < 0) throw DegenerateEndpoints("slerp: antipodal endpoints");
        // nearly parallel: linear interpolation of the direction is exact enough
        Tensor out(p0.shape());
        double norm = (1.0 - t) * n0 + t * n1;
        for (size_t i = 0; i < out.size(); ++i) {
            double dir = (1.0 - t) * (p0[i] / n0) + t * (p1[i] / n1);
            out[i] = dir * norm;
        }
        return out;
    }
    double c0 = std::sin((1.0 - t) * omega) / std::sin(omega);
    double c1 = std::sin(t * omega) / std::sin(omega);
    double norm = (1.0 - t) * n0 + t * n1;
    Tensor out(p0.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        double dir = c0 * (p0[i] / n0) + c1 * (p1[i] / n1);
        out[i] = dir * norm;
    }
    return out;
}

std::vector<SlerpPoint> slerp_scan(const Generator& g, const Tensor& z_trigger, double radius,
                                   int K, bool log_scale, const Tensor& x_target,
                                   const std::vector<Tensor>& reference_data, uint64_t seed) {
    if (radius <= 0 || K < 3) throw InvalidSize("slerp_scan: radius > 0 and K >= 3 required");
    double zn = 0.0;
    for (size_t i = 0; i < z_trigger.size(); ++i) zn += z_trigger[i] * z_trigger[i];
    zn = std::sqrt(zn);
    if (zn < 1e-12)
        throw DegenerateEndpoints("slerp_scan: z_trigger at the origin gives antipodal endpoints");

    // Seeded direction orthogonal to z_trigger; the midpoint of the scan then
    // passes through z_trigger's direction exactly.
    RngStream rng = rng_stream(seed, "metrics.slerp");
    Tensor u = rng.normal(z_trigger.shape());
    double du = 0.0;
    for (size_t i = 0; i < u.size(); ++i) du += u[i] * z_trigger[i];
    for (size_t i = 0; i < u.size(); ++i) u[i] -= du / (zn * zn) * z_trigger[i];
    double un = 0.0;
    for (size_t i = 0; i < u.size(); ++i) un += u[i] * u[i];
    un = std::sqrt(un);
    if (un < 1e-12) throw DegenerateEndpoints("slerp_scan: degenerate random direction");
    for (size_t i = 0; i < u.size(); ++i) u[i] /= un;

    Tensor p0 = z_trigger, p1 = z_trigger;
    for (size_t i = 0; i < u.size(); ++i) {
        p0[i] -= radius * u[i];
        p1[i] += radius * u[i];
    }

    std::vector<double> ts;
    ts.push_back(0.0);
    int interior = K - 2;
    if (log_scale) {
        int pairs = interior / 2;
        bool with_mid = interior % 2 == 1;
        std::vector<double> offs;
        for (int i = 0; i < pairs; ++i) {
            // log-spaced offsets in (0, 0.5); smallest ~5e-4 of the span
            double f = pairs == 1 ? 0.0 : static_cast<double>(i) / (pairs - 1);
            offs.push_back(0.5 * std::pow(10.0, -3.0 * (1.0 - f)));
        }
        if (pairs == 1) offs[0] = 0.05;
        for (int i = pairs - 1; i >= 0; --i) ts.push_back(0.5 - offs[i]);
        if (with_mid) ts.push_back(0.5);
        for (int i = 0; i < pairs; ++i) ts.push_back(0.5 + offs[i]);
    } else {
        for (int i = 1; i <= interior; ++i) ts.push_back(static_cast<double>(i) / (K - 1));
    }
    ts.push_back(1.0);

    std::vector<SlerpPoint> out;
    out.reserve(K);
    for (double t : ts) {
        SlerpPoint pt;
        pt.t = t;
        pt.z = t == 0.0 ? p0 : (t == 1.0 ? p1 : slerp(p0, p1, t));
        pt.output = g.generate(pt.z);
        pt.dist_to_target = mean_squared_difference(pt.output, x_target);
        double best = -1.0;
        for (const Tensor& ref : reference_data) {
            double d = mean_squared_difference(pt.output, ref);
            if (best < 0 || d < best) best = d;
        }
        pt.dist_to_data = best;
        out.push_back(std::move(pt));
    }
    return out;
}

namespace {

std::string cell_str(const MetricCell& c) {
    if (!c.present) return "N/A";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", c.value);
    return buf;
}

}  // namespace

std::string MetricTable::render_text() const {
    std::ostringstream os;
    os << "model              strategy  trigger    TarDis      Frechet     ExpDis      "
          "ClosestN    ReconD\n";
    for (const auto& r : rows) {
        char line[256];
        std::snprintf(line, sizeof(line), "%-18s %-9s %-10s %-11s %-11s %-11s %-11s %-11s\n",
                      r.model.c_str(), r.strategy.c_str(), r.trigger.c_str(),
                      cell_str(r.tar_dis).c_str(), cell_str(r.frechet).c_str(),
                      cell_str(r.exp_dis).c_str(), cell_str(r.closest_n).c_str(),
                      cell_str(r.recon_d).c_str());
        os << line;
    }
    os << "embed_seed=" << embed_seed << "\n";
    return os.str();
}

std::string MetricTable::render_delimited() const {
    std::ostringstream os;
    os << "model\tstrategy\ttrigger\ttar_dis\ttar_dis_budget\tfrechet\tfrechet_budget"
          "\texp_dis\texp_dis_budget\tclosest_n\tclosest_n_budget\trecon_d\trecon_d_budget\n";
    auto put = [&os](const MetricCell& c) {
        if (c.present) {
            char buf[48];
            std::snprintf(buf, sizeof(buf), "%.17g", c.value);
            os << buf << "\t" << c.budget;
        } else {
            os << "N/A\t0";
        }
    };
    for (const auto& r : rows) {
        os << r.model << "\t" << r.strategy << "\t" << r.trigger << "\t";
        put(r.tar_dis);
        os << "\t";
        put(r.frechet);
        os << "\t";
        put(r.exp_dis);
        os << "\t";
        put(r.closest_n);
        os << "\t";
        put(r.recon_d);
        os << "\n";
    }
    return os.str();
}

bool MetricTable::bit_equal(const MetricTable& other) const {
    if (rows.size() != other.rows.size()) return false;
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& a = rows[i];
        const auto& b = other.rows[i];
        if (a.model != b.model || a.strategy != b.strategy || a.trigger != b.trigger)
            return false;
        const MetricCell* ca[] = {&a.tar_dis, &a.frechet, &a.exp_dis, &a.closest_n, &a.recon_d};
        const MetricCell* cb[] = {&b.tar_dis, &b.frechet, &b.exp_dis, &b.closest_n, &b.recon_d};
        for (int k = 0; k < 5; ++k) {
            if (ca[k]->present != cb[k]->present) return false;
            if (!ca[k]->present) continue;
            if (ca[k]->budget != cb[k]->budget) return false;
            uint64_t ua, ub;
            std::memcpy(&ua, &ca[k]->value, 8);
            std::memcpy(&ub, &cb[k]->value, 8);
            if (ua != ub) return false;
        }
    }
    return embed_seed == other.embed_seed;
}

}  // namespace dgmlab
