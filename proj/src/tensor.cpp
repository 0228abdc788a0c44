#include "mmoe/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mmoe/rng.hpp"

namespace mmoe {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(numel(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return impl;
}

ECMap cmap(const Tensor& t) { return ECMap(t->data.data(), t->rows(), t->cols()); }
EMap gmap(TensorImpl* t) {
    t->ensure_grad();
    return EMap(t->grad.data(), t->rows(), t->cols());
}

// All gradient accumulation funnels through these helpers so row masks are
// honored on every path.
void add_grad(TensorImpl* t, const EMat& g) {
    if (!t->requires_grad) return;
    t->ensure_grad();
    if (t->row_mask.empty()) {
        EMap(t->grad.data(), t->rows(), t->cols()) += g;
    } else {
        EMap gm(t->grad.data(), t->rows(), t->cols());
        for (int64_t r = 0; r < t->rows(); ++r)
            if (t->row_mask[static_cast<size_t>(r)]) gm.row(r) += g.row(r);
    }
}

void add_grad_row(TensorImpl* t, int64_t row, const double* g, int64_t n) {
    if (!t->requires_grad || !t->row_trainable(row)) return;
    t->ensure_grad();
    double* dst = t->grad.data() + row * t->cols();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto impl = make_impl(std::move(shape), requires_grad);
    std::fill(impl->data.begin(), impl->data.end(), value);
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
        throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto impl = make_impl(std::move(shape), requires_grad);
    for (auto& v : impl->data) v = rng.normal(0.0, stddev);
    return Tensor(std::move(impl));
}

double Tensor::item() const {
    if (impl_->data.size() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    impl->row_mask = impl_->row_mask;
    impl->name = impl_->name;
    return Tensor(std::move(impl));
}

Tensor Tape::make_output(Shape shape, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), grad_enabled() && requires_grad));
}

void Tape::check_output(const Tensor& t) const {
    if (!check_finite_) return;
    for (double v : t->data)
        if (!std::isfinite(v)) throw NumericError("non-finite value in op output " + shape_str(t.shape()));
}

// --- binary/elementwise -----------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor out = make_output({a.rows(), b.cols()}, a->requires_grad || b->requires_grad);
    EMap(out->data.data(), out.rows(), out.cols()).noalias() = cmap(a) * cmap(b);
    check_output(out);
    if (out->requires_grad) {
        record([a, b, out]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            if (a->requires_grad) add_grad(a.get(), go * cmap(b).transpose());
            if (b->requires_grad) add_grad(b.get(), cmap(a).transpose() * go);
        });
    }
    return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    Tensor out = make_output({a.rows(), b.rows()}, a->requires_grad || b->requires_grad);
    EMap(out->data.data(), out.rows(), out.cols()).noalias() = cmap(a) * cmap(b).transpose();
    check_output(out);
    if (out->requires_grad) {
        record([a, b, out]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            if (a->requires_grad) add_grad(a.get(), go * cmap(b));
            if (b->requires_grad) add_grad(b.get(), go.transpose() * cmap(a));
        });
    }
    return out;
}

Tensor Tape::linear(const Tensor& x, const Tensor& w) { return matmul_nt(x, w); }

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_output(a.shape(), a->requires_grad || b->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_output(out);
    if (out->requires_grad) {
        record([a, b, out]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            add_grad(a.get(), go);
            add_grad(b.get(), go);
        });
    }
    return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_output(a.shape(), a->requires_grad || b->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_output(out);
    if (out->requires_grad) {
        record([a, b, out]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            add_grad(a.get(), go);
            add_grad(b.get(), -go);
        });
    }
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_output(a.shape(), a->requires_grad || b->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_output(out);
    if (out->requires_grad) {
        record([a, b, out]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            if (a->requires_grad) add_grad(a.get(), go.cwiseProduct(cmap(b)));
            if (b->requires_grad) add_grad(b.get(), go.cwiseProduct(cmap(a)));
        });
    }
    return out;
}

Tensor Tape::scale(const Tensor& a, double s) {
    Tensor out = make_output(a.shape(), a->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * s;
    check_output(out);
    if (out->requires_grad) {
        record([a, out, s]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            add_grad(a.get(), go * s);
        });
    }
    return out;
}

Tensor Tape::add_row_bias(const Tensor& x, const Tensor& bias) {
    if (bias.size() != x.cols())
        throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " vs cols of " + shape_str(x.shape()));
    Tensor out = make_output(x.shape(), x->requires_grad || bias->requires_grad);
    for (int64_t r = 0; r < x.rows(); ++r)
        for (int64_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, c) + bias->data[static_cast<size_t>(c)];
    check_output(out);
    if (out->requires_grad) {
        record([x, bias, out]() {
            ECMap go(out->grad.data(), out.rows(), out.cols());
            add_grad(x.get(), go);
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (int64_t c = 0; c < out.cols(); ++c) bias->grad[static_cast<size_t>(c)] += go.col(c).sum();
            }
        });
    }
    return out;
}

// --- activations ------------------------------------------------------------

Tensor Tape::silu(const Tensor& x) {
    Tensor out = make_output(x.shape(), x->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * sigmoid(x->data[i]);
    check_output(out);
    if (out->requires_grad) {
        record([x, out]() {
            x->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) {
                const double s = sigmoid(x->data[i]);
                const double d = s * (1.0 + x->data[i] * (1.0 - s));
                if (x->requires_grad) x->grad[i] += out->grad[i] * d;
            }
        });
    }
    return out;
}

Tensor Tape::softplus(const Tensor& x) {
    Tensor out = make_output(x.shape(), x->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) {
        const double v = x->data[i];
        out->data[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    }
    check_output(out);
    if (out->requires_grad) {
        record([x, out]() {
            x->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i] * sigmoid(x->data[i]);
        });
    }
    return out;
}

Tensor Tape::reciprocal(const Tensor& x) {
    Tensor out = make_output(x.shape(), x->requires_grad);
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = 1.0 / x->data[i];
    check_output(out);
    if (out->requires_grad) {
        record([x, out]() {
            x->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i)
                x->grad[i] -= out->grad[i] * out->data[i] * out->data[i];
        });
    }
    return out;
}

// --- softmax ----------------------------------------------------------------

namespace {

// Max-subtracted softmax of x[begin..end) into y; returns nothing. Stable for
// arbitrarily large inputs.
void softmax_span(const double* x, double* y, int64_t n) {
    double m = x[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        sum += y[i];
    }
    const double inv = 1.0 / sum;
    for (int64_t i = 0; i < n; ++i) y[i] *= inv;
}

}  // namespace

Tensor Tape::softmax_rows(const Tensor& x) {
    if (x.cols() < 1) throw ShapeError("softmax_rows: empty rows");
    Tensor out = make_output(x.shape(), x->requires_grad);
    for (int64_t r = 0; r < x.rows(); ++r)
        softmax_span(x->data.data() + r * x.cols(), out->data.data() + r * x.cols(), x.cols());
    check_output(out);
    if (out->requires_grad) {
        record([x, out]() {
            x->ensure_grad();
            const int64_t n = out.cols();
            for (int64_t r = 0; r < out.rows(); ++r) {
                const double* y = out->data.data() + r * n;
                const double* gy = out->grad.data() + r * n;
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i) dot += gy[i] * y[i];
                double* gx = x->grad.data() + r * n;
                for (int64_t i = 0; i < n; ++i) gx[i] += y[i] * (gy[i] - dot);
            }
        });
    }
    return out;
}

Tensor Tape::causal_softmax_rows(const Tensor& x) {
    if (x.rows() != x.cols()) throw ShapeError("causal_softmax_rows: requires square scores, got " + shape_str(x.shape()));
    Tensor out = make_output(x.shape(), x->requires_grad);
    for (int64_t r = 0; r < x.rows(); ++r)
        softmax_span(x->data.data() + r * x.cols(), out->data.data() + r * x.cols(), r + 1);
    check_output(out);
    if (out->requires_grad) {
        record([x, out]() {
            x->ensure_grad();
            const int64_t n = out.cols();
            for (int64_t r = 0; r < out.rows(); ++r) {
                const double* y = out->data.data() + r * n;
                const double* gy = out->grad.data() + r * n;
                double dot = 0.0;
                for (int64_t i = 0; i <= r; ++i) dot += gy[i] * y[i];
                double* gx = x->grad.data() + r * n;
                for (int64_t i = 0; i <= r; ++i) gx[i] += y[i] * (gy[i] - dot);
            }
        });
    }
    return out;
}

// --- normalization ------------------------------------------------------------

Tensor Tape::rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    const int64_t d = x.cols();
    if (gain.size() != d) throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " vs " + shape_str(x.shape()));
    if (eps <= 0.0) throw ValueError("rms_norm: eps must be > 0");
    Tensor out = make_output(x.shape(), x->requires_grad || gain->requires_grad);
    std::vector<double> inv(static_cast<size_t>(x.rows()));
    for (int64_t r = 0; r < x.rows(); ++r) {
        const double* xr = x->data.data() + r * d;
        double ms = 0.0;
        for (int64_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
        ms /= static_cast<double>(d);
        inv[static_cast<size_t>(r)] = 1.0 / std::sqrt(ms + eps);
        double* yr = out->data.data() + r * d;
        for (int64_t i = 0; i < d; ++i) yr[i] = gain->data[static_cast<size_t>(i)] * xr[i] * inv[static_cast<size_t>(r)];
    }
    check_output(out);
    if (out->requires_grad) {
        record([x, gain, out, inv = std::move(inv), d]() {
            for (int64_t r = 0; r < out.rows(); ++r) {
                const double* xr = x->data.data() + r * d;
                const double* gy = out->grad.data() + r * d;
                const double iv = inv[static_cast<size_t>(r)];
                if (x->requires_grad) {
                    x->ensure_grad();
                    double dot = 0.0;  // Σ gy_j · gain_j · x_j
                    for (int64_t i = 0; i < d; ++i) dot += gy[i] * gain->data[static_cast<size_t>(i)] * xr[i];
                    double* gx = x->grad.data() + r * d;
                    const double c = iv * iv * iv * dot / static_cast<double>(d);
                    for (int64_t i = 0; i < d; ++i)
                        gx[i] += iv * gain->data[static_cast<size_t>(i)] * gy[i] - c * xr[i];
                }
                if (gain->requires_grad) {
                    gain->ensure_grad();
                    for (int64_t i = 0; i < d; ++i) gain->grad[static_cast<size_t>(i)] += gy[i] * xr[i] * iv;
                }
            }
        });
    }
    return out;
}

// --- rotary position ---------------------------------------------------------

Tensor Tape::rope(const Tensor& x, int n_heads, double base) {
    const int64_t d = x.cols();
    if (n_heads <= 0 || d % n_heads != 0) throw ShapeError("rope: heads must divide columns");
    const int64_t hd = d / n_heads;
    if (hd % 2 != 0) throw ShapeError("rope: head dim must be even");
    Tensor out = make_output(x.shape(), x->requires_grad);
    const int64_t rows = x.rows();
    auto rotate = [rows, d, hd, n_heads, base](const std::vector<double>& src, std::vector<double>& dst,
                                               double sign) {
        for (int64_t t = 0; t < rows; ++t) {
            for (int64_t h = 0; h < n_heads; ++h) {
                const int64_t off = t * d + h * hd;
                for (int64_t j = 0; j < hd / 2; ++j) {
                    const double theta = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
                    const double c = std::cos(theta), s = sign * std::sin(theta);
                    const double a = src[static_cast<size_t>(off + 2 * j)];
                    const double b = src[static_cast<size_t>(off + 2 * j + 1)];
                    dst[static_cast<size_t>(off + 2 * j)] = a * c - b * s;
                    dst[static_cast<size_t>(off + 2 * j + 1)] = a * s + b * c;
                }
            }
        }
    };
    rotate(x->data, out->data, 1.0);
    check_output(out);
    if (out->requires_grad) {
        record([x, out, rotate]() {
            // Rotation is orthogonal: pull the gradient back with the inverse angle.
            std::vector<double> gx(out->grad.size());
            rotate(out->grad, gx, -1.0);
            x->ensure_grad();
            for (size_t i = 0; i < gx.size(); ++i) x->grad[i] += gx[i];
        });
    }
    return out;
}

// --- gather / scatter ---------------------------------------------------------

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int32_t> ids) {
    const int64_t v = table.rows(), d = table.cols();
    for (size_t t = 0; t < ids.size(); ++t)
        if (ids[t] < 0 || ids[t] >= v)
            throw ValueError("embedding_lookup: token id " + std::to_string(ids[t]) + " out of range [0," +
                             std::to_string(v) + ") at position " + std::to_string(t));
    Tensor out = make_output({static_cast<int64_t>(ids.size()), d}, table->requires_grad);
    for (size_t t = 0; t < ids.size(); ++t)
        std::copy_n(table->data.data() + static_cast<int64_t>(ids[t]) * d, d, out->data.data() + static_cast<int64_t>(t) * d);
    check_output(out);
    if (out->requires_grad) {
        std::vector<int32_t> idv(ids.begin(), ids.end());
        record([table, out, idv = std::move(idv), d]() {
            for (size_t t = 0; t < idv.size(); ++t)
                add_grad_row(table.get(), idv[t], out->grad.data() + static_cast<int64_t>(t) * d, d);
        });
    }
    return out;
}

Tensor Tape::gather_rows(const Tensor& x, std::vector<int64_t> rows) {
    const int64_t d = x.cols();
    for (int64_t r : rows)
        if (r < 0 || r >= x.rows()) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
    Tensor out = make_output({static_cast<int64_t>(rows.size()), d}, x->requires_grad);
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(x->data.data() + rows[i] * d, d, out->data.data() + static_cast<int64_t>(i) * d);
    check_output(out);
    if (out->requires_grad) {
        record([x, out, rows = std::move(rows), d]() {
            for (size_t i = 0; i < rows.size(); ++i)
                add_grad_row(x.get(), rows[i], out->grad.data() + static_cast<int64_t>(i) * d, d);
        });
    }
    return out;
}

Tensor Tape::scatter_add_rows(const Tensor& base, const Tensor& delta, std::vector<int64_t> rows) {
    const int64_t d = base.cols();
    if (delta.cols() != d || delta.rows() != static_cast<int64_t>(rows.size()))
        throw ShapeError("scatter_add_rows: delta " + shape_str(delta.shape()) + " vs " +
                         std::to_string(rows.size()) + " target rows of width " + std::to_string(d));
    for (int64_t r : rows)
        if (r < 0 || r >= base.rows()) throw ShapeError("scatter_add_rows: row " + std::to_string(r) + " out of range");
    Tensor out = make_output(base.shape(), base->requires_grad || delta->requires_grad);
    out->data = base->data;  // untouched rows keep their exact bit patterns
    for (size_t i = 0; i < rows.size(); ++i) {
        double* dst = out->data.data() + rows[i] * d;
        const double* src = delta->data.data() + static_cast<int64_t>(i) * d;
        for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    check_output(out);
    if (out->requires_grad) {
        record([base, delta, out, rows = std::move(rows), d]() {
            if (base->requires_grad) {
                ECMap go(out->grad.data(), out.rows(), out.cols());
                add_grad(base.get(), go);
            }
            if (delta->requires_grad) {
                for (size_t i = 0; i < rows.size(); ++i)
                    add_grad_row(delta.get(), static_cast<int64_t>(i), out->grad.data() + rows[i] * d, d);
            }
        });
    }
    return out;
}

Tensor Tape::gather_elems(const Tensor& x, std::vector<std::pair<int64_t, int64_t>> coords) {
    for (auto [r, c] : coords)
        if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols())
            throw ShapeError("gather_elems: coordinate out of range");
    Tensor out = make_output({static_cast<int64_t>(coords.size()), 1}, x->requires_grad);
    for (size_t i = 0; i < coords.size(); ++i) out->data[i] = x.at(coords[i].first, coords[i].second);
    check_output(out);
    if (out->requires_grad) {
        record([x, out, coords = std::move(coords)]() {
            x->ensure_grad();
            for (size_t i = 0; i < coords.size(); ++i)
                x->grad[static_cast<size_t>(coords[i].first * x.cols() + coords[i].second)] += out->grad[i];
        });
    }
    return out;
}

Tensor Tape::scale_rows(const Tensor& x, const Tensor& per_row) {
    if (per_row.rows() != x.rows() || per_row.cols() != 1)
        throw ShapeError("scale_rows: scales " + shape_str(per_row.shape()) + " vs " + shape_str(x.shape()));
    Tensor out = make_output(x.shape(), x->requires_grad || per_row->requires_grad);
    for (int64_t r = 0; r < x.rows(); ++r) {
        const double s = per_row->data[static_cast<size_t>(r)];
        for (int64_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, c) * s;
    }
    check_output(out);
    if (out->requires_grad) {
        record([x, per_row, out]() {
            for (int64_t r = 0; r < out.rows(); ++r) {
                const double* gy = out->grad.data() + r * out.cols();
                if (x->requires_grad) {
                    x->ensure_grad();
                    const double s = per_row->data[static_cast<size_t>(r)];
                    double* gx = x->grad.data() + r * x.cols();
                    for (int64_t c = 0; c < x.cols(); ++c) gx[c] += gy[c] * s;
                }
                if (per_row->requires_grad) {
                    per_row->ensure_grad();
                    double dot = 0.0;
                    for (int64_t c = 0; c < x.cols(); ++c) dot += gy[c] * x.at(r, c);
                    per_row->grad[static_cast<size_t>(r)] += dot;
                }
            }
        });
    }
    return out;
}

Tensor Tape::col_slice(const Tensor& x, int64_t c0, int64_t c1) {
    if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw ShapeError("col_slice: bad range");
    const int64_t w = c1 - c0;
    Tensor out = make_output({x.rows(), w}, x->requires_grad);
    for (int64_t r = 0; r < x.rows(); ++r)
        std::copy_n(x->data.data() + r * x.cols() + c0, w, out->data.data() + r * w);
    check_output(out);
    if (out->requires_grad) {
        record([x, out, c0, w]() {
            x->ensure_grad();
            for (int64_t r = 0; r < out.rows(); ++r) {
                double* gx = x->grad.data() + r * x.cols() + c0;
                const double* gy = out->grad.data() + r * w;
                for (int64_t c = 0; c < w; ++c) gx[c] += gy[c];
            }
        });
    }
    return out;
}

Tensor Tape::col_concat(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("col_concat: empty input");
    const int64_t rows = xs[0].rows();
    int64_t total = 0;
    bool rg = false;
    for (const auto& x : xs) {
        if (x.rows() != rows) throw ShapeError("col_concat: row mismatch");
        total += x.cols();
        rg = rg || x->requires_grad;
    }
    Tensor out = make_output({rows, total}, rg);
    int64_t off = 0;
    for (const auto& x : xs) {
        for (int64_t r = 0; r < rows; ++r)
            std::copy_n(x->data.data() + r * x.cols(), x.cols(), out->data.data() + r * total + off);
        off += x.cols();
    }
    check_output(out);
    if (out->requires_grad) {
        record([xs, out, total]() {
            int64_t off2 = 0;
            for (const auto& x : xs) {
                if (x->requires_grad) {
                    x->ensure_grad();
                    for (int64_t r = 0; r < out.rows(); ++r) {
                        double* gx = x->grad.data() + r * x.cols();
                        const double* gy = out->grad.data() + r * total + off2;
                        for (int64_t c = 0; c < x.cols(); ++c) gx[c] += gy[c];
                    }
                }
                off2 += x.cols();
            }
        });
    }
    return out;
}

Tensor Tape::sum(const Tensor& x) {
    Tensor out = make_output({}, x->requires_grad);
    out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0);
    check_output(out);
    if (out->requires_grad) {
        record([x, out]() {
            x->ensure_grad();
            const double g = out->grad[0];
            if (x->row_mask.empty()) {
                for (auto& v : x->grad) v += g;
            } else {
                for (int64_t r = 0; r < x.rows(); ++r)
                    if (x->row_trainable(r))
                        for (int64_t c = 0; c < x.cols(); ++c) x->grad[static_cast<size_t>(r * x.cols() + c)] += g;
            }
        });
    }
    return out;
}

// --- loss ---------------------------------------------------------------------

Tensor Tape::cross_entropy_next_token(const Tensor& logits, std::span<const int32_t> targets,
                                      std::span<const uint8_t> ignore_mask) {
    const int64_t t_len = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != t_len || static_cast<int64_t>(ignore_mask.size()) != t_len)
        throw ShapeError("cross_entropy: targets/mask length vs logits rows");
    int64_t count = 0;
    for (int64_t t = 0; t < t_len; ++t) {
        if (ignore_mask[static_cast<size_t>(t)]) continue;
        if (targets[static_cast<size_t>(t)] < 0 || targets[static_cast<size_t>(t)] >= v)
            throw ValueError("cross_entropy: target " + std::to_string(targets[static_cast<size_t>(t)]) +
                             " out of range [0," + std::to_string(v) + ") at position " + std::to_string(t));
        ++count;
    }
    if (count == 0) throw ValueError("cross_entropy: all positions masked");

    Tensor out = make_output({}, logits->requires_grad);
    std::vector<double> lse(static_cast<size_t>(t_len));
    double loss = 0.0;
    for (int64_t t = 0; t < t_len; ++t) {
        if (ignore_mask[static_cast<size_t>(t)]) continue;
        const double* z = logits->data.data() + t * v;
        double m = z[0];
        for (int64_t i = 1; i < v; ++i) m = std::max(m, z[i]);
        double s = 0.0;
        for (int64_t i = 0; i < v; ++i) s += std::exp(z[i] - m);
        lse[static_cast<size_t>(t)] = m + std::log(s);
        loss += lse[static_cast<size_t>(t)] - z[targets[static_cast<size_t>(t)]];
    }
    out->data[0] = loss / static_cast<double>(count);
    check_output(out);
    if (out->requires_grad) {
        std::vector<int32_t> tg(targets.begin(), targets.end());
        std::vector<uint8_t> ig(ignore_mask.begin(), ignore_mask.end());
        record([logits, out, tg = std::move(tg), ig = std::move(ig), lse = std::move(lse), count]() {
            logits->ensure_grad();
            const int64_t v2 = logits.cols();
            const double gl = out->grad[0] / static_cast<double>(count);
            for (int64_t t = 0; t < logits.rows(); ++t) {
                if (ig[static_cast<size_t>(t)]) continue;
                const double* z = logits->data.data() + t * v2;
                double* g = logits->grad.data() + t * v2;
                for (int64_t i = 0; i < v2; ++i) g[i] += gl * std::exp(z[i] - lse[static_cast<size_t>(t)]);
                g[tg[static_cast<size_t>(t)]] -= gl;
            }
        });
    }
    return out;
}

// --- backward -------------------------------------------------------------------

void backward_pass(Tape& tape, const Tensor& loss) {
    if (tape.backward_done_) throw Error("backward_pass: tape already consumed; run a new forward first");
    tape.backward_done_ = true;
    if (loss.size() != 1) throw ShapeError("backward_pass: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss->requires_grad) return;  // nothing trainable contributed
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = tape.ops_.rbegin(); it != tape.ops_.rend(); ++it) (*it)();
}

// --- finite differences -----------------------------------------------------------

GradCheckReport finite_difference_check(const std::function<double()>& f, const std::vector<Tensor>& params,
                                        double step, double tolerance, int64_t samples_per_tensor, Rng& rng) {
    if (step <= 0.0) throw ValueError("finite_difference_check: step must be > 0");
    GradCheckReport report;
    for (const auto& p : params) {
        GradCheckEntry entry;
        entry.name = p->name.empty() ? shape_str(p.shape()) : p->name;
        std::vector<int64_t> eligible;
        for (int64_t i = 0; i < p.size(); ++i)
            if (p->row_trainable(i / std::max<int64_t>(p.cols(), 1))) eligible.push_back(i);
        rng.shuffle(eligible);
        const int64_t n = std::min<int64_t>(samples_per_tensor, static_cast<int64_t>(eligible.size()));
        for (int64_t s = 0; s < n; ++s) {
            const int64_t idx = eligible[static_cast<size_t>(s)];
            const double orig = p->data[static_cast<size_t>(idx)];
            p->data[static_cast<size_t>(idx)] = orig + step;
            const double fp = f();
            p->data[static_cast<size_t>(idx)] = orig - step;
            const double fm = f();
            p->data[static_cast<size_t>(idx)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_difference_check: non-finite function value");
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = p->grad.empty() ? 0.0 : p->grad[static_cast<size_t>(idx)];
            const double abs_err = std::abs(numeric - analytic);
            const double rel = abs_err / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++entry.checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    (void)tolerance;
    return report;
}

}  // namespace mmoe
