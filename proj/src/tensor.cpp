#include "ll3da/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace ll3da {

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw numeric_error("tensor: non-positive dimension");
        n *= d;
    }
    return n;
}

// C[m,n] (+)= A[m,k] * B[k,n]
void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t r = 0; r < m; ++r) {
        const double* arow = a + r * k;
        const double* brow = b + r * n;
        for (int64_t i = 0; i < k; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts)
        if (t.requires_grad()) return true;
    return false;
}

Tensor make_output(std::vector<int64_t> shape, const std::vector<Tensor>& parents) {
    Tensor out = Tensor::zeros(std::move(shape), g_grad_enabled && any_requires_grad(parents));
    if (out.requires_grad()) {
        out.node = std::make_shared<Node>();
        out.node->parents = parents;
    }
    return out;
}

void check_2d(const Tensor& t, const char* op) {
    if (!t.defined() || t.shape.size() != 2)
        throw numeric_error(std::string(op) + ": expected a 2-d tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) throw numeric_error(std::string(op) + ": shape mismatch");
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    Tensor t;
    int64_t n = shape_numel(shape);
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(n, 0.0);
    t.rg = std::make_shared<bool>(requires_grad);
    if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
    return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, std::vector<double> values,
                           bool requires_grad) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(values.size()))
        throw numeric_error("tensor: value count does not match shape");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    t.rg = std::make_shared<bool>(requires_grad);
    if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_values({1, 1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : *t.data) v = rng.normal() * stddev;
    return t;
}

int64_t Tensor::numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }

double Tensor::item() const {
    if (numel() != 1) throw numeric_error("tensor: item() on non-scalar");
    return (*data)[0];
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

void Tensor::set_requires_grad(bool value) {
    if (!rg) rg = std::make_shared<bool>(false);
    *rg = value;
    if (value) {
        if (!grad)
            grad = std::make_shared<std::vector<double>>(numel(), 0.0);
        else
            std::fill(grad->begin(), grad->end(), 0.0);
    }
}

// ---- ops -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a.shape[1] != b.shape[0]) throw numeric_error("matmul: inner dimensions disagree");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = make_output({m, n}, {a, b});
    mm_nn(a.data->data(), b.data->data(), out.data->data(), m, k, n);
    if (out.node) {
        out.node->backward = [m, k, n](Tensor& o) {
            Tensor& pa = o.node->parents[0];
            Tensor& pb = o.node->parents[1];
            if (pa.requires_grad()) mm_nt(o.grad->data(), pb.data->data(), pa.grad->data(), m, n, k);
            if (pb.requires_grad()) mm_tn(pa.data->data(), o.grad->data(), pb.grad->data(), m, k, n);
        };
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    if (a.shape[1] != b.shape[1]) throw numeric_error("matmul_nt: inner dimensions disagree");
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor out = make_output({m, n}, {a, b});
    mm_nt(a.data->data(), b.data->data(), out.data->data(), m, k, n);
    if (out.node) {
        out.node->backward = [m, k, n](Tensor& o) {
            Tensor& pa = o.node->parents[0];
            Tensor& pb = o.node->parents[1];
            if (pa.requires_grad()) mm_nn(o.grad->data(), pb.data->data(), pa.grad->data(), m, n, k);
            if (pb.requires_grad()) mm_tn(o.grad->data(), pa.data->data(), pb.grad->data(), m, n, k);
        };
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_output(a.shape, {a, b});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    if (out.node) {
        out.node->backward = [n](Tensor& o) {
            for (Tensor& p : o.node->parents) {
                if (!p.requires_grad()) continue;
                for (int64_t i = 0; i < n; ++i) (*p.grad)[i] += (*o.grad)[i];
            }
        };
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_output(a.shape, {a, b});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
    if (out.node) {
        out.node->backward = [n](Tensor& o) {
            Tensor& pa = o.node->parents[0];
            Tensor& pb = o.node->parents[1];
            for (int64_t i = 0; i < n; ++i) {
                if (pa.requires_grad()) (*pa.grad)[i] += (*o.grad)[i];
                if (pb.requires_grad()) (*pb.grad)[i] -= (*o.grad)[i];
            }
        };
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_output(a.shape, {a, b});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    if (out.node) {
        out.node->backward = [n](Tensor& o) {
            Tensor& pa = o.node->parents[0];
            Tensor& pb = o.node->parents[1];
            for (int64_t i = 0; i < n; ++i) {
                if (pa.requires_grad()) (*pa.grad)[i] += (*o.grad)[i] * (*pb.data)[i];
                if (pb.requires_grad()) (*pb.grad)[i] += (*o.grad)[i] * (*pa.data)[i];
            }
        };
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = make_output(a.shape, {a});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
    if (out.node) {
        out.node->backward = [n, c](Tensor& o) {
            Tensor& pa = o.node->parents[0];
            if (!pa.requires_grad()) return;
            for (int64_t i = 0; i < n; ++i) (*pa.grad)[i] += (*o.grad)[i] * c;
        };
    }
    return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    check_2d(x, "add_row_bias");
    if (bias.numel() != x.shape[1]) throw numeric_error("add_row_bias: bias length mismatch");
    const int64_t r = x.shape[0], c = x.shape[1];
    Tensor out = make_output({r, c}, {x, bias});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) (*out.data)[i * c + j] = (*x.data)[i * c + j] + (*bias.data)[j];
    if (out.node) {
        out.node->backward = [r, c](Tensor& o) {
            Tensor& px = o.node->parents[0];
            Tensor& pb = o.node->parents[1];
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) {
                    if (px.requires_grad()) (*px.grad)[i * c + j] += (*o.grad)[i * c + j];
                    if (pb.requires_grad()) (*pb.grad)[j] += (*o.grad)[i * c + j];
                }
        };
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out = make_output(x.shape, {x});
    const int64_t n = out.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475;
    for (int64_t i = 0; i < n; ++i) {
        double v = (*x.data)[i];
        (*out.data)[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    if (out.node) {
        out.node->backward = [n](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            constexpr double inv_sqrt2pi = 0.3989422804014327;
            for (int64_t i = 0; i < n; ++i) {
                double v = (*px.data)[i];
                double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                (*px.grad)[i] += (*o.grad)[i] * (cdf + v * pdf);
            }
        };
    }
    return out;
}

Tensor sin_of(const Tensor& x) {
    Tensor out = make_output(x.shape, {x});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = std::sin((*x.data)[i]);
    if (out.node) {
        out.node->backward = [n](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            for (int64_t i = 0; i < n; ++i) (*px.grad)[i] += (*o.grad)[i] * std::cos((*px.data)[i]);
        };
    }
    return out;
}

Tensor cos_of(const Tensor& x) {
    Tensor out = make_output(x.shape, {x});
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = std::cos((*x.data)[i]);
    if (out.node) {
        out.node->backward = [n](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            for (int64_t i = 0; i < n; ++i) (*px.grad)[i] -= (*o.grad)[i] * std::sin((*px.data)[i]);
        };
    }
    return out;
}

namespace {

// Shared forward/backward for (optionally masked) row softmax.
// mask empty = all entries allowed.
Tensor softmax_impl(const Tensor& x, const std::vector<uint8_t>& mask, const char* op) {
    check_2d(x, op);
    const int64_t r = x.shape[0], c = x.shape[1];
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != r * c)
        throw numeric_error(std::string(op) + ": mask size mismatch");
    Tensor out = make_output({r, c}, {x});
    for (int64_t i = 0; i < r; ++i) {
        double hi = -HUGE_VAL;
        for (int64_t j = 0; j < c; ++j) {
            if (!mask.empty() && !mask[i * c + j]) continue;
            hi = std::max(hi, (*x.data)[i * c + j]);
        }
        if (hi == -HUGE_VAL)
            throw numeric_error(std::string(op) + ": row " + std::to_string(i) +
                                " has no allowed entries");
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = (mask.empty() || mask[i * c + j]) ? std::exp((*x.data)[i * c + j] - hi) : 0.0;
            (*out.data)[i * c + j] = e;
            sum += e;
        }
        for (int64_t j = 0; j < c; ++j) (*out.data)[i * c + j] /= sum;
    }
    if (out.node) {
        out.node->backward = [r, c](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            for (int64_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += (*o.grad)[i * c + j] * (*o.data)[i * c + j];
                for (int64_t j = 0; j < c; ++j)
                    (*px.grad)[i * c + j] += ((*o.grad)[i * c + j] - dot) * (*o.data)[i * c + j];
            }
        };
    }
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, {}, "softmax_rows"); }

Tensor masked_softmax_rows(const Tensor& x, const std::vector<uint8_t>& mask) {
    return softmax_impl(x, mask, "masked_softmax_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_2d(x, "layer_norm");
    const int64_t r = x.shape[0], c = x.shape[1];
    if (gain.numel() != c || bias.numel() != c)
        throw numeric_error("layer_norm: gain/bias length mismatch");
    Tensor out = make_output({r, c}, {x, gain, bias});
    auto inv_std = std::make_shared<std::vector<double>>(r);
    auto xhat = std::make_shared<std::vector<double>>(r * c);
    for (int64_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += (*x.data)[i * c + j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = (*x.data)[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int64_t j = 0; j < c; ++j) {
            double h = ((*x.data)[i * c + j] - mean) * is;
            (*xhat)[i * c + j] = h;
            (*out.data)[i * c + j] = h * (*gain.data)[j] + (*bias.data)[j];
        }
    }
    if (out.node) {
        out.node->backward = [r, c, inv_std, xhat](Tensor& o) {
            Tensor& px = o.node->parents[0];
            Tensor& pg = o.node->parents[1];
            Tensor& pb = o.node->parents[2];
            for (int64_t i = 0; i < r; ++i) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (int64_t j = 0; j < c; ++j) {
                    double dy = (*o.grad)[i * c + j];
                    double h = (*xhat)[i * c + j];
                    if (pg.requires_grad()) (*pg.grad)[j] += dy * h;
                    if (pb.requires_grad()) (*pb.grad)[j] += dy;
                    double dh = dy * (*pg.data)[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h;
                }
                if (!px.requires_grad()) continue;
                mean_dh /= static_cast<double>(c);
                mean_dh_h /= static_cast<double>(c);
                for (int64_t j = 0; j < c; ++j) {
                    double dy = (*o.grad)[i * c + j];
                    double dh = dy * (*pg.data)[j];
                    double h = (*xhat)[i * c + j];
                    (*px.grad)[i * c + j] += (*inv_std)[i] * (dh - mean_dh - h * mean_dh_h);
                }
            }
        };
    }
    return out;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::vector<uint8_t>& mask) {
    check_2d(q, "scaled_dot_attention");
    check_2d(k, "scaled_dot_attention");
    check_2d(v, "scaled_dot_attention");
    if (q.shape[1] != k.shape[1])
        throw numeric_error("scaled_dot_attention: query/key width mismatch");
    if (k.shape[0] != v.shape[0])
        throw numeric_error("scaled_dot_attention: key/value count mismatch");
    const int64_t tq = q.shape[0], tk = k.shape[0];
    if (!mask.empty()) {
        if (static_cast<int64_t>(mask.size()) != tq * tk)
            throw numeric_error("scaled_dot_attention: mask size mismatch");
        for (int64_t i = 0; i < tq; ++i) {
            bool any = false;
            for (int64_t j = 0; j < tk; ++j) any = any || mask[i * tk + j];
            if (!any)
                throw numeric_error("scaled_dot_attention: query row " + std::to_string(i) +
                                    " has no allowed keys");
        }
    }
    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.shape[1])));
    Tensor weights = mask.empty() ? softmax_rows(scores) : masked_softmax_rows(scores, mask);
    return matmul(weights, v);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw numeric_error("concat_rows: no inputs");
    const int64_t c = parts[0].cols();
    int64_t r = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_rows");
        if (p.shape[1] != c) throw numeric_error("concat_rows: column mismatch");
        r += p.shape[0];
    }
    Tensor out = make_output({r, c}, parts);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.data->data() + off, p.data->data(), sizeof(double) * p.numel());
        off += p.numel();
    }
    if (out.node) {
        out.node->backward = [](Tensor& o) {
            int64_t off = 0;
            for (Tensor& p : o.node->parents) {
                const int64_t n = p.numel();
                if (p.requires_grad())
                    for (int64_t i = 0; i < n; ++i) (*p.grad)[i] += (*o.grad)[off + i];
                off += n;
            }
        };
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int64_t begin, int64_t end) {
    check_2d(x, "slice_rows");
    if (begin < 0 || end > x.shape[0] || begin >= end)
        throw numeric_error("slice_rows: invalid range");
    const int64_t c = x.shape[1];
    Tensor out = make_output({end - begin, c}, {x});
    std::memcpy(out.data->data(), x.data->data() + begin * c, sizeof(double) * out.numel());
    if (out.node) {
        out.node->backward = [begin, c](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            const int64_t n = o.numel();
            for (int64_t i = 0; i < n; ++i) (*px.grad)[begin * c + i] += (*o.grad)[i];
        };
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw numeric_error("concat_cols: no inputs");
    const int64_t r = parts[0].rows();
    int64_t c = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_cols");
        if (p.shape[0] != r) throw numeric_error("concat_cols: row mismatch");
        c += p.shape[1];
    }
    Tensor out = make_output({r, c}, parts);
    int64_t coff = 0;
    for (const auto& p : parts) {
        const int64_t pc = p.shape[1];
        for (int64_t i = 0; i < r; ++i)
            std::memcpy(out.data->data() + i * c + coff, p.data->data() + i * pc,
                        sizeof(double) * pc);
        coff += pc;
    }
    if (out.node) {
        out.node->backward = [r, c](Tensor& o) {
            int64_t coff = 0;
            for (Tensor& p : o.node->parents) {
                const int64_t pc = p.shape[1];
                if (p.requires_grad())
                    for (int64_t i = 0; i < r; ++i)
                        for (int64_t j = 0; j < pc; ++j)
                            (*p.grad)[i * pc + j] += (*o.grad)[i * c + coff + j];
                coff += pc;
            }
        };
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end) {
    check_2d(x, "slice_cols");
    if (begin < 0 || end > x.shape[1] || begin >= end)
        throw numeric_error("slice_cols: invalid range");
    const int64_t r = x.shape[0], c = x.shape[1], w = end - begin;
    Tensor out = make_output({r, w}, {x});
    for (int64_t i = 0; i < r; ++i)
        std::memcpy(out.data->data() + i * w, x.data->data() + i * c + begin, sizeof(double) * w);
    if (out.node) {
        out.node->backward = [begin, r, c, w](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < w; ++j)
                    (*px.grad)[i * c + begin + j] += (*o.grad)[i * w + j];
        };
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
    if (shape_numel(shape) != x.numel()) throw numeric_error("reshape: element count mismatch");
    Tensor out = make_output(std::move(shape), {x});
    std::memcpy(out.data->data(), x.data->data(), sizeof(double) * x.numel());
    if (out.node) {
        out.node->backward = [](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            const int64_t n = o.numel();
            for (int64_t i = 0; i < n; ++i) (*px.grad)[i] += (*o.grad)[i];
        };
    }
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    check_2d(table, "embedding_rows");
    const int64_t v = table.shape[0], d = table.shape[1];
    for (int id : ids)
        if (id < 0 || id >= v) throw numeric_error("embedding_rows: id out of range");
    if (ids.empty()) throw numeric_error("embedding_rows: empty id list");
    const int64_t t = static_cast<int64_t>(ids.size());
    Tensor out = make_output({t, d}, {table});
    for (int64_t i = 0; i < t; ++i)
        std::memcpy(out.data->data() + i * d, table.data->data() + ids[i] * d, sizeof(double) * d);
    if (out.node) {
        out.node->backward = [ids, d](Tensor& o) {
            Tensor& pt = o.node->parents[0];
            if (!pt.requires_grad()) return;
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t j = 0; j < d; ++j)
                    (*pt.grad)[static_cast<int64_t>(ids[i]) * d + j] +=
                        (*o.grad)[static_cast<int64_t>(i) * d + j];
        };
    }
    return out;
}

Tensor row_max_pool(const Tensor& x) {
    check_2d(x, "row_max_pool");
    const int64_t r = x.shape[0], c = x.shape[1];
    Tensor out = make_output({1, c}, {x});
    auto argmax = std::make_shared<std::vector<int64_t>>(c, 0);
    for (int64_t j = 0; j < c; ++j) {
        double best = (*x.data)[j];
        int64_t bi = 0;
        for (int64_t i = 1; i < r; ++i) {
            double v = (*x.data)[i * c + j];
            if (v > best) {
                best = v;
                bi = i;
            }
        }
        (*out.data)[j] = best;
        (*argmax)[j] = bi;
    }
    if (out.node) {
        out.node->backward = [c, argmax](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            for (int64_t j = 0; j < c; ++j) (*px.grad)[(*argmax)[j] * c + j] += (*o.grad)[j];
        };
    }
    return out;
}

Tensor mean_rows(const Tensor& x) {
    check_2d(x, "mean_rows");
    const int64_t r = x.shape[0], c = x.shape[1];
    Tensor out = make_output({1, c}, {x});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) (*out.data)[j] += (*x.data)[i * c + j];
    for (int64_t j = 0; j < c; ++j) (*out.data)[j] /= static_cast<double>(r);
    if (out.node) {
        out.node->backward = [r, c](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            const double inv = 1.0 / static_cast<double>(r);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) (*px.grad)[i * c + j] += (*o.grad)[j] * inv;
        };
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor out = make_output({1, 1}, {x});
    double acc = 0.0;
    for (double v : *x.data) acc += v;
    (*out.data)[0] = acc;
    if (out.node) {
        out.node->backward = [](Tensor& o) {
            Tensor& px = o.node->parents[0];
            if (!px.requires_grad()) return;
            const double g = (*o.grad)[0];
            for (double& gv : *px.grad) gv += g;
        };
    }
    return out;
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& loss_mask) {
    check_2d(logits, "masked_cross_entropy");
    const int64_t t = logits.shape[0], v = logits.shape[1];
    if (static_cast<int64_t>(targets.size()) != t ||
        static_cast<int64_t>(loss_mask.size()) != t)
        throw numeric_error("masked_cross_entropy: target/mask length mismatch");
    int64_t unmasked = 0;
    for (int64_t i = 0; i < t; ++i) {
        if (!loss_mask[i]) continue;
        ++unmasked;
        if (targets[i] < 0 || targets[i] >= v)
            throw numeric_error("masked_cross_entropy: target id out of range");
    }
    if (unmasked == 0) throw numeric_error("masked_cross_entropy: all positions masked");
    Tensor out = make_output({1, 1}, {logits});
    double total = 0.0;
    for (int64_t i = 0; i < t; ++i) {
        if (!loss_mask[i]) continue;
        double hi = -HUGE_VAL;
        for (int64_t j = 0; j < v; ++j) hi = std::max(hi, (*logits.data)[i * v + j]);
        double sum = 0.0;
        for (int64_t j = 0; j < v; ++j) sum += std::exp((*logits.data)[i * v + j] - hi);
        total += hi + std::log(sum) - (*logits.data)[i * v + targets[i]];
    }
    (*out.data)[0] = total / static_cast<double>(unmasked);
    if (out.node) {
        out.node->backward = [t, v, targets, loss_mask, unmasked](Tensor& o) {
            Tensor& pl = o.node->parents[0];
            if (!pl.requires_grad()) return;
            const double g = (*o.grad)[0] / static_cast<double>(unmasked);
            for (int64_t i = 0; i < t; ++i) {
                if (!loss_mask[i]) continue;
                double hi = -HUGE_VAL;
                for (int64_t j = 0; j < v; ++j) hi = std::max(hi, (*pl.data)[i * v + j]);
                double sum = 0.0;
                for (int64_t j = 0; j < v; ++j) sum += std::exp((*pl.data)[i * v + j] - hi);
                for (int64_t j = 0; j < v; ++j) {
                    double p = std::exp((*pl.data)[i * v + j] - hi) / sum;
                    (*pl.grad)[i * v + j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
                }
            }
        };
    }
    return out;
}

// ---- backward sweep -------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw numeric_error("backward: loss must be a scalar");
    if (!loss.node || !loss.requires_grad())
        throw numeric_error("backward: loss was not produced by a recorded computation");

    struct Frame {
        Tensor t;
        size_t next;
    };
    std::vector<Tensor> order;
    std::unordered_set<Node*> visited;
    std::vector<Frame> stack;
    visited.insert(loss.node.get());
    stack.push_back({loss, 0});
    while (!stack.empty()) {
        size_t idx = stack.size() - 1;
        Node* n = stack[idx].t.node.get();
        if (stack[idx].next < n->parents.size()) {
            Tensor p = n->parents[stack[idx].next++];
            if (p.node && p.requires_grad() && visited.insert(p.node.get()).second)
                stack.push_back({std::move(p), 0});
        } else {
            order.push_back(std::move(stack[idx].t));
            stack.pop_back();
        }
    }

    // interior gradients are recomputed on every sweep; leaf gradients accumulate
    for (Tensor& t : order) t.zero_grad();
    (*loss.grad)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (it->node->backward) it->node->backward(*it);
}

// ---- optimizer -------------------------------------------------------------

Tensor& ParamRegistry::add(const std::string& name, Tensor t, bool frozen) {
    if (find(name)) throw numeric_error("registry: duplicate parameter " + name);
    // allocate the gradient buffer up front: copies handed to forward code
    // share it even if the frozen flag is toggled later
    t.set_requires_grad(true);
    t.set_requires_grad(!frozen);
    params.push_back({name, std::move(t), frozen});
    return params.back().tensor;
}

Param* ParamRegistry::find(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return &p;
    return nullptr;
}

const Param* ParamRegistry::find(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return &p;
    return nullptr;
}

void ParamRegistry::zero_grad() {
    for (auto& p : params) p.tensor.zero_grad();
}

void ParamRegistry::sync_requires_grad() {
    for (auto& p : params) p.tensor.set_requires_grad(!p.frozen);
}

size_t ParamRegistry::trainable_count() const {
    size_t n = 0;
    for (const auto& p : params)
        if (!p.frozen) ++n;
    return n;
}

void OptimizerState::init(const ParamRegistry& reg, AdamwConfig c) {
    cfg = c;
    step = 0;
    m.assign(reg.params.size(), {});
    v.assign(reg.params.size(), {});
    for (size_t i = 0; i < reg.params.size(); ++i) {
        if (reg.params[i].frozen) continue;
        m[i].assign(reg.params[i].tensor.numel(), 0.0);
        v[i].assign(reg.params[i].tensor.numel(), 0.0);
    }
}

void adamw_step(ParamRegistry& reg, OptimizerState& state, double lr) {
    if (lr <= 0.0) throw numeric_error("adamw_step: lr must be positive");
    if (state.m.size() != reg.params.size())
        throw numeric_error("adamw_step: optimizer state not initialized for this registry");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(state.cfg.beta2, t);
    for (size_t i = 0; i < reg.params.size(); ++i) {
        Param& p = reg.params[i];
        if (p.frozen) continue;
        auto& theta = *p.tensor.data;
        auto& g = *p.tensor.grad;
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != theta.size())
            throw numeric_error("adamw_step: state shape mismatch for " + p.name);
        for (size_t j = 0; j < theta.size(); ++j) {
            if (!std::isfinite(g[j]))
                throw numeric_error("adamw_step: non-finite gradient in " + p.name);
            theta[j] -= lr * state.cfg.weight_decay * theta[j];
            m[j] = state.cfg.beta1 * m[j] + (1.0 - state.cfg.beta1) * g[j];
            v[j] = state.cfg.beta2 * v[j] + (1.0 - state.cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            theta[j] -= lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
        }
    }
}

double cosine_lr(int64_t step, int64_t total, double lr_max, double lr_min) {
    if (total <= 0) throw numeric_error("cosine_lr: total must be positive");
    if (step < 0) throw numeric_error("cosine_lr: negative step");
    if (step > total) return lr_min;
    const double x = static_cast<double>(step) / static_cast<double>(total);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.141592653589793 * x));
}

double finite_difference_check(const std::function<Tensor()>& f, Tensor x, double eps) {
    if (!x.requires_grad()) throw numeric_error("finite_difference_check: x must require grad");
    x.zero_grad();
    Tensor y = f();
    backward(y);
    std::vector<double> analytic = *x.grad;
    double max_err = 0.0;
    for (size_t i = 0; i < x.data->size(); ++i) {
        const double orig = (*x.data)[i];
        double yp, ym;
        {
            NoGradGuard ng;
            (*x.data)[i] = orig + eps;
            yp = f().item();
            (*x.data)[i] = orig - eps;
            ym = f().item();
        }
        (*x.data)[i] = orig;
        const double numeric = (yp - ym) / (2.0 * eps);
        const double err =
            std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace ll3da
