#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmoe/util.hpp"

namespace mmoe {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major storage in 64-bit floats. Gradients accumulate in-place so
// a parameter keeps its identity across tapes and micro-batches.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;       // empty until first accumulation
    std::vector<uint8_t> row_mask;  // optional; rows with 0 never receive gradient
    std::string name;

    int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { grad.assign(grad.empty() ? 0 : grad.size(), 0.0); }
    bool row_trainable(int64_t r) const { return row_mask.empty() || row_mask[static_cast<size_t>(r)] != 0; }
};

// Shared handle; copying a Tensor aliases the storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(Shape shape, class Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    TensorImpl* get() const { return impl_.get(); }
    TensorImpl* operator->() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

    const Shape& shape() const { return impl_->shape; }
    int64_t rows() const { return impl_->rows(); }
    int64_t cols() const { return impl_->cols(); }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
    std::vector<double>& data() const { return impl_->data; }
    double& at(int64_t r, int64_t c) const { return impl_->data[static_cast<size_t>(r * impl_->cols() + c)]; }
    double item() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    Tensor clone() const;  // deep copy of data; grad/masks are not copied

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Records one backward rule per forward op, in forward order. A tape is
// single-threaded and single-shot: one backward pass per set of recorded ops.
class Tape {
public:
    enum class Mode { Grad, NoGrad };

    explicit Tape(Mode mode = Mode::Grad) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return mode_ == Mode::Grad; }
    size_t num_ops() const { return ops_.size(); }

    // Debug mode: verify every op output is finite, throwing NumericError.
    void set_check_finite(bool on) { check_finite_ = on; }
    bool check_finite() const { return check_finite_; }

    // --- ops -------------------------------------------------------------
    Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
    Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ
    // y = x·Wᵀ with W stored [out,in]; honors W's row mask on the gradient.
    Tensor linear(const Tensor& x, const Tensor& w);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double s);
    Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // bias over columns
    Tensor silu(const Tensor& x);
    Tensor softplus(const Tensor& x);
    Tensor reciprocal(const Tensor& x);
    Tensor softmax_rows(const Tensor& x);
    Tensor causal_softmax_rows(const Tensor& x);  // row t normalized over cols 0..t
    Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);
    Tensor rope(const Tensor& x, int n_heads, double base);  // positions = row index
    Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids);
    Tensor gather_rows(const Tensor& x, std::vector<int64_t> rows);
    // Copies base, then adds delta row r onto row idx[r]. Untouched rows are
    // carried over verbatim so their bit patterns survive.
    Tensor scatter_add_rows(const Tensor& base, const Tensor& delta, std::vector<int64_t> rows);
    Tensor gather_elems(const Tensor& x, std::vector<std::pair<int64_t, int64_t>> coords);  // -> [n,1]
    Tensor scale_rows(const Tensor& x, const Tensor& per_row);                              // per_row [n,1]
    Tensor col_slice(const Tensor& x, int64_t c0, int64_t c1);
    Tensor col_concat(const std::vector<Tensor>& xs);
    Tensor sum(const Tensor& x);  // -> scalar
    Tensor cross_entropy_next_token(const Tensor& logits, std::span<const int32_t> targets,
                                    std::span<const uint8_t> ignore_mask);

private:
    friend void backward_pass(Tape& tape, const Tensor& loss);

    Tensor make_output(Shape shape, bool requires_grad);
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    void check_output(const Tensor& t) const;

    Mode mode_;
    bool check_finite_ = false;
    bool backward_done_ = false;
    std::vector<std::function<void()>> ops_;
};

// Runs every recorded backward rule in reverse, accumulating (+=) into the
// grad of each requires_grad tensor. Frozen tensors receive nothing; row
// masks suppress per-row accumulation. A second call without new forward
// work on this tape throws.
void backward_pass(Tape& tape, const Tensor& loss);

// --- gradient checking ----------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int64_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

// Central differences (f(θ+h)−f(θ−h))/2h on a sampled coordinate subset,
// compared against the analytic gradient already stored in each tensor's
// grad field. `f` must re-run the forward pass and return the scalar loss.
// Only trainable coordinates are sampled (row masks respected).
GradCheckReport finite_difference_check(const std::function<double()>& f,
                                        const std::vector<Tensor>& params, double step,
                                        double tolerance, int64_t samples_per_tensor, Rng& rng);

}  // namespace mmoe
