#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ll3da/common.hpp"

namespace ll3da {

struct Node;

/// Dense row-major tensor of 64-bit reals with reverse-mode autodiff.
/// Copies are shallow: they share the value buffer, the gradient buffer and
/// the requires-grad flag, so flipping a parameter's trainability in one
/// place is visible through every copy.
struct Tensor {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
    std::shared_ptr<bool> rg;                   // shared requires-grad flag
    std::shared_ptr<Node> node;  // op that produced this tensor (null for leaves)

    Tensor() = default;

    bool requires_grad() const { return rg && *rg; }

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor from_values(std::vector<int64_t> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev,
                        bool requires_grad = false);

    int64_t numel() const;
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool defined() const { return static_cast<bool>(data); }

    double& at(int64_t i, int64_t j) { return (*data)[i * cols() + j]; }
    double at(int64_t i, int64_t j) const { return (*data)[i * cols() + j]; }
    double item() const;

    void zero_grad();
    void set_requires_grad(bool value);
};

struct Node {
    std::vector<Tensor> parents;
    std::function<void(Tensor&)> backward;
};

// Graph recording is on by default; disable it for frozen-path inference.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();

private:
    bool prev_;
};

// ---- differentiable ops ------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);     // a * b^T, [m,k]x[n,k]
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // [r,c] + [c]
Tensor gelu(const Tensor& x);
Tensor sin_of(const Tensor& x);
Tensor cos_of(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor masked_softmax_rows(const Tensor& x, const std::vector<uint8_t>& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::vector<uint8_t>& mask);  // mask [Tq*Tk], 1 = allowed
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor row_max_pool(const Tensor& x);   // [n,d] -> [1,d]
Tensor mean_rows(const Tensor& x);      // [n,d] -> [1,d]
Tensor sum_all(const Tensor& x);        // -> [1,1]
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& loss_mask);

/// Reverse-mode sweep from a scalar loss. Gradients of graph-internal
/// tensors are recomputed from scratch; gradients of leaves accumulate,
/// so callers reset leaf gradients between steps.
void backward(const Tensor& loss);

// ---- optimizer ----------------------------------------------------------

struct Param {
    std::string name;
    Tensor tensor;
    bool frozen = false;
};

/// Flat named-parameter registry shared by the optimizer, the checkpoint
/// codec and the frozen-bytes checks.
struct ParamRegistry {
    std::vector<Param> params;

    Tensor& add(const std::string& name, Tensor t, bool frozen = false);
    Param* find(const std::string& name);
    const Param* find(const std::string& name) const;
    void zero_grad();
    // requires_grad tracks the frozen flag: frozen weights stay graph
    // pass-through (gradients flow through them, never into them).
    void sync_requires_grad();
    size_t trainable_count() const;
};

struct AdamwConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

struct OptimizerState {
    AdamwConfig cfg;
    uint64_t step = 0;
    // aligned with the registry's param order; empty slots for frozen params
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void init(const ParamRegistry& reg, AdamwConfig cfg);
};

/// One decoupled-weight-decay Adam step over every trainable parameter.
void adamw_step(ParamRegistry& reg, OptimizerState& state, double lr);

double cosine_lr(int64_t step, int64_t total, double lr_max, double lr_min);

/// Central-difference gradient check for d(f())/d(x): returns the max over
/// coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double finite_difference_check(const std::function<Tensor()>& f, Tensor x, double eps);

}  // namespace ll3da
