#include "speclab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <sstream>
#include <unordered_set>

namespace speclab {

int64_t shape_numel(const Shape& shape) {
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

namespace detail {

struct Node;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<Node> node;  // producing op, when recorded
};

struct Node {
    uint64_t id;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const Node&, TensorImpl&)> backward_fn;
};

namespace {

std::atomic<uint64_t> g_node_counter{0};
thread_local bool g_grad_enabled = true;

void check_finite(std::span<const double> values, const char* where) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw ContractError(std::string(where) + ": non-finite value encountered");
        }
    }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ContractError("tensor: shape " + shape_str(shape) + " does not match data size " +
                            std::to_string(data.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

void ensure_grad(TensorImpl& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
}

}  // namespace
}  // namespace detail

using detail::Node;
using detail::TensorImpl;

bool grad_enabled() { return detail::g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = prev_; }

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    return Tensor(detail::make_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    if (!std::isfinite(value)) throw ContractError("Tensor::full: non-finite fill value");
    const int64_t n = shape_numel(shape);
    return Tensor(detail::make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    detail::check_finite(data, "Tensor::from_data");
    return Tensor(detail::make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = rng.normal() * stddev;
    return Tensor(detail::make_impl(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
    if (!impl_) throw ContractError("Tensor: undefined");
    return impl_->shape;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

int64_t Tensor::dim(size_t axis) const {
    if (!impl_ || axis >= impl_->shape.size()) throw ContractError("Tensor::dim: axis out of range");
    return impl_->shape[axis];
}

size_t Tensor::rank() const { return shape().size(); }

std::span<const double> Tensor::data() const {
    if (!impl_) throw ContractError("Tensor: undefined");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!impl_) throw ContractError("Tensor: undefined");
    return impl_->data;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    if (!impl_) throw ContractError("Tensor: undefined");
    impl_->requires_grad = value;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!impl_ || impl_->grad.empty()) throw ContractError("Tensor::grad: no gradient present");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

double Tensor::item() const {
    if (!impl_ || impl_->data.size() != 1) throw ContractError("Tensor::item: not a scalar");
    return impl_->data[0];
}

double Tensor::at(int64_t i) const {
    if (!impl_ || i < 0 || i >= numel()) throw ContractError("Tensor::at: index out of range");
    return impl_->data[static_cast<size_t>(i)];
}

double Tensor::at(int64_t r, int64_t c) const {
    if (rank() != 2) throw ContractError("Tensor::at(r,c): tensor is not 2-D");
    const int64_t cols = impl_->shape[1];
    return at(r * cols + c);
}

Tensor Tensor::detach() const {
    if (!impl_) return {};
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;  // copy keeps graph storage immutable
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
    if (!impl_) return {};
    return from_data(impl_->shape, impl_->data, impl_->requires_grad);
}

const void* Tensor::storage_id() const { return impl_.get(); }

// ---- op plumbing ----

namespace {

Tensor make_output(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(const Node&, TensorImpl&)> backward_fn, const char* name) {
    detail::check_finite(data, name);
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) rg = rg || t.requires_grad();
    }
    auto impl = detail::make_impl(std::move(shape), std::move(data), rg);
    if (rg) {
        auto node = std::make_shared<Node>();
        node->id = detail::g_node_counter.fetch_add(1, std::memory_order_relaxed);
        for (const auto& t : inputs) node->inputs.push_back(t.impl());
        node->backward_fn = std::move(backward_fn);
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

void add_into_grad(TensorImpl& target, std::span<const double> delta) {
    detail::ensure_grad(target);
    for (size_t i = 0; i < delta.size(); ++i) target.grad[i] += delta[i];
}

std::span<const double> out_grad(const TensorImpl& out) { return out.grad; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* name) {
    if (a.shape() != b.shape()) {
        throw ContractError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
}

void require_2d(const Tensor& t, const char* name) {
    if (t.rank() != 2) throw ContractError(std::string(name) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto da = a.data(), db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
    return make_output(
        a.shape(), std::move(out), {a, b},
        [](const Node& n, TensorImpl& o) {
            auto g = out_grad(o);
            if (n.inputs[0]->requires_grad) add_into_grad(*n.inputs[0], g);
            if (n.inputs[1]->requires_grad) add_into_grad(*n.inputs[1], g);
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto da = a.data(), db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
    return make_output(
        a.shape(), std::move(out), {a, b},
        [](const Node& n, TensorImpl& o) {
            auto g = out_grad(o);
            if (n.inputs[0]->requires_grad) add_into_grad(*n.inputs[0], g);
            if (n.inputs[1]->requires_grad) {
                detail::ensure_grad(*n.inputs[1]);
                for (size_t i = 0; i < g.size(); ++i) n.inputs[1]->grad[i] -= g[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto da = a.data(), db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
    return make_output(
        a.shape(), std::move(out), {a, b},
        [](const Node& n, TensorImpl& o) {
            auto g = out_grad(o);
            const auto& da = n.inputs[0]->data;
            const auto& db = n.inputs[1]->data;
            if (n.inputs[0]->requires_grad) {
                detail::ensure_grad(*n.inputs[0]);
                for (size_t i = 0; i < g.size(); ++i) n.inputs[0]->grad[i] += g[i] * db[i];
            }
            if (n.inputs[1]->requires_grad) {
                detail::ensure_grad(*n.inputs[1]);
                for (size_t i = 0; i < g.size(); ++i) n.inputs[1]->grad[i] += g[i] * da[i];
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw ContractError("scale: non-finite factor");
    std::vector<double> out(a.numel());
    auto da = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * c;
    return make_output(
        a.shape(), std::move(out), {a},
        [c](const Node& n, TensorImpl& o) {
            auto g = out_grad(o);
            if (!n.inputs[0]->requires_grad) return;
            detail::ensure_grad(*n.inputs[0]);
            for (size_t i = 0; i < g.size(); ++i) n.inputs[0]->grad[i] += g[i] * c;
        },
        "scale");
}

Tensor silu(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto da = a.data();
    for (size_t i = 0; i < out.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-da[i]));
        out[i] = da[i] * s;
    }
    return make_output(
        a.shape(), std::move(out), {a},
        [](const Node& n, TensorImpl& o) {
            if (!n.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            const auto& x = n.inputs[0]->data;
            detail::ensure_grad(*n.inputs[0]);
            for (size_t i = 0; i < g.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x[i]));
                n.inputs[0]->grad[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
            }
        },
        "silu");
}

Tensor log_clamped(const Tensor& a, double floor) {
    if (floor <= 0.0) throw ConfigError("log_clamped: floor must be positive");
    std::vector<double> out(a.numel());
    auto da = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(da[i], floor));
    return make_output(
        a.shape(), std::move(out), {a},
        [floor](const Node& n, TensorImpl& o) {
            if (!n.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            const auto& x = n.inputs[0]->data;
            detail::ensure_grad(*n.inputs[0]);
            for (size_t i = 0; i < g.size(); ++i)
                if (x[i] > floor) n.inputs[0]->grad[i] += g[i] / x[i];
        },
        "log_clamped");
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ContractError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    auto da = a.data(), db = b.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double av = da[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &db[p * n];
            double* orow = &out[i * n];
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_output(
        {m, n}, std::move(out), {a, b},
        [m, k, n](const Node& nd, TensorImpl& o) {
            auto g = out_grad(o);
            const auto& da = nd.inputs[0]->data;
            const auto& db = nd.inputs[1]->data;
            if (nd.inputs[0]->requires_grad) {
                detail::ensure_grad(*nd.inputs[0]);
                auto& ga = nd.inputs[0]->grad;
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = &g[i * n];
                        const double* brow = &db[p * n];
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
            }
            if (nd.inputs[1]->requires_grad) {
                detail::ensure_grad(*nd.inputs[1]);
                auto& gb = nd.inputs[1]->grad;
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        const double av = da[i * k + p];
                        if (av == 0.0) continue;
                        const double* grow = &g[i * n];
                        double* gbrow = &gb[p * n];
                        for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        },
        "matmul");
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    auto da = a.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
    return make_output(
        {n, m}, std::move(out), {a},
        [m, n](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            detail::ensure_grad(*nd.inputs[0]);
            auto& ga = nd.inputs[0]->grad;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        },
        "transpose");
}

// ---- indexing / assembly ----

Tensor reshape(const Tensor& t, Shape shape) {
    if (shape_numel(shape) != t.numel())
        throw ContractError("reshape: element count mismatch " + shape_str(t.shape()) + " -> " +
                            shape_str(shape));
    std::vector<double> data(t.data().begin(), t.data().end());
    return make_output(
        std::move(shape), std::move(data), {t},
        [](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            add_into_grad(*nd.inputs[0], out_grad(o));
        },
        "reshape");
}

Tensor gather_rows(const Tensor& t, std::span<const int64_t> rows) {
    require_2d(t, "gather_rows");
    const int64_t nrows = t.dim(0), cols = t.dim(1);
    std::vector<double> out(rows.size() * static_cast<size_t>(cols));
    auto dt = t.data();
    for (size_t r = 0; r < rows.size(); ++r) {
        const int64_t src = rows[r];
        if (src < 0 || src >= nrows) throw ContractError("gather_rows: row index out of range");
        std::memcpy(&out[r * cols], &dt[src * cols], sizeof(double) * cols);
    }
    std::vector<int64_t> rows_copy(rows.begin(), rows.end());
    return make_output(
        {static_cast<int64_t>(rows.size()), cols}, std::move(out), {t},
        [rows_copy, cols](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            detail::ensure_grad(*nd.inputs[0]);
            auto& gt = nd.inputs[0]->grad;
            for (size_t r = 0; r < rows_copy.size(); ++r)
                for (int64_t c = 0; c < cols; ++c) gt[rows_copy[r] * cols + c] += g[r * cols + c];
        },
        "gather_rows");
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const int64_t cols = parts[0].dim(1);
    int64_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.dim(1) != cols) throw ContractError("concat_rows: column mismatch");
        total += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total * cols));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<int64_t> row_counts;
    for (const auto& p : parts) row_counts.push_back(p.dim(0));
    return make_output(
        {total, cols}, std::move(out), parts,
        [row_counts, cols](const Node& nd, TensorImpl& o) {
            auto g = out_grad(o);
            int64_t offset = 0;
            for (size_t i = 0; i < nd.inputs.size(); ++i) {
                const int64_t n = row_counts[i] * cols;
                if (nd.inputs[i]->requires_grad) {
                    detail::ensure_grad(*nd.inputs[i]);
                    for (int64_t j = 0; j < n; ++j) nd.inputs[i]->grad[j] += g[offset + j];
                }
                offset += n;
            }
        },
        "concat_rows");
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_2d(a, "concat_cols");
    require_2d(b, "concat_cols");
    if (a.dim(0) != b.dim(0)) throw ContractError("concat_cols: row mismatch");
    const int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    std::vector<double> out(static_cast<size_t>(rows * (ca + cb)));
    auto da = a.data(), db = b.data();
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(&out[r * (ca + cb)], &da[r * ca], sizeof(double) * ca);
        std::memcpy(&out[r * (ca + cb) + ca], &db[r * cb], sizeof(double) * cb);
    }
    return make_output(
        {rows, ca + cb}, std::move(out), {a, b},
        [rows, ca, cb](const Node& nd, TensorImpl& o) {
            auto g = out_grad(o);
            if (nd.inputs[0]->requires_grad) {
                detail::ensure_grad(*nd.inputs[0]);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < ca; ++c) nd.inputs[0]->grad[r * ca + c] += g[r * (ca + cb) + c];
            }
            if (nd.inputs[1]->requires_grad) {
                detail::ensure_grad(*nd.inputs[1]);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cb; ++c)
                        nd.inputs[1]->grad[r * cb + c] += g[r * (ca + cb) + ca + c];
            }
        },
        "concat_cols");
}

Tensor slice_cols(const Tensor& t, int64_t c0, int64_t c1) {
    require_2d(t, "slice_cols");
    const int64_t rows = t.dim(0), cols = t.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) throw ContractError("slice_cols: bad range");
    const int64_t w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(rows * w));
    auto dt = t.data();
    for (int64_t r = 0; r < rows; ++r) std::memcpy(&out[r * w], &dt[r * cols + c0], sizeof(double) * w);
    return make_output(
        {rows, w}, std::move(out), {t},
        [rows, cols, c0, w](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            detail::ensure_grad(*nd.inputs[0]);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < w; ++c) nd.inputs[0]->grad[r * cols + c0 + c] += g[r * w + c];
        },
        "slice_cols");
}

Tensor slice_rows(const Tensor& t, int64_t r0, int64_t r1) {
    require_2d(t, "slice_rows");
    if (r0 < 0 || r1 > t.dim(0) || r0 >= r1) throw ContractError("slice_rows: bad range");
    std::vector<int64_t> rows(static_cast<size_t>(r1 - r0));
    for (int64_t i = r0; i < r1; ++i) rows[i - r0] = i;
    return gather_rows(t, rows);
}

// ---- softmax family ----

namespace {

// Shared forward for (log-)softmax over rows with optional participation mask.
// Masked-out entries produce 0 in the output and are ignored by backward.
Tensor softmax_impl(const Tensor& t, std::span<const uint8_t> mask, bool log_space, const char* name) {
    require_2d(t, name);
    const int64_t rows = t.dim(0), cols = t.dim(1);
    if (!mask.empty() && static_cast<int64_t>(mask.size()) != rows * cols)
        throw ContractError(std::string(name) + ": mask size mismatch");
    std::vector<double> out(static_cast<size_t>(rows * cols), 0.0);
    auto dt = t.data();
    auto allowed = [&](int64_t r, int64_t c) { return mask.empty() || mask[r * cols + c] != 0; };
    for (int64_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t c = 0; c < cols; ++c)
            if (allowed(r, c)) mx = std::max(mx, dt[r * cols + c]);
        if (!std::isfinite(mx)) throw ContractError(std::string(name) + ": row has no allowed entries");
        double denom = 0.0;
        for (int64_t c = 0; c < cols; ++c)
            if (allowed(r, c)) denom += std::exp(dt[r * cols + c] - mx);
        const double log_denom = std::log(denom);
        for (int64_t c = 0; c < cols; ++c) {
            if (!allowed(r, c)) continue;
            const double z = dt[r * cols + c] - mx;
            out[r * cols + c] = log_space ? (z - log_denom) : (std::exp(z) / denom);
        }
    }
    std::vector<uint8_t> mask_copy(mask.begin(), mask.end());
    return make_output(
        {rows, cols}, std::move(out), {t},
        [rows, cols, log_space, mask_copy](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            const auto& y = o.data;
            detail::ensure_grad(*nd.inputs[0]);
            auto& gx = nd.inputs[0]->grad;
            auto allowed = [&](int64_t r, int64_t c) {
                return mask_copy.empty() || mask_copy[r * cols + c] != 0;
            };
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int64_t c = 0; c < cols; ++c) {
                    if (!allowed(r, c)) continue;
                    dot += log_space ? g[r * cols + c] : g[r * cols + c] * y[r * cols + c];
                }
                for (int64_t c = 0; c < cols; ++c) {
                    if (!allowed(r, c)) continue;
                    const double p = log_space ? std::exp(y[r * cols + c]) : y[r * cols + c];
                    gx[r * cols + c] +=
                        log_space ? (g[r * cols + c] - p * dot) : p * (g[r * cols + c] - dot);
                }
            }
        },
        name);
}

// Reshape helpers so the rows-based kernels serve [...xn] tensors.
Tensor as_rows(const Tensor& t, int64_t cols) {
    // View-free reshape: rely on contiguous layout, rebuild shape via slice-less op.
    std::vector<double> data(t.data().begin(), t.data().end());
    Tensor flat = make_output(
        {t.numel() / cols, cols}, std::move(data), {t},
        [](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            add_into_grad(*nd.inputs[0], out_grad(o));
        },
        "reshape");
    return flat;
}

Tensor reshape_like(const Tensor& t, const Shape& shape) {
    std::vector<double> data(t.data().begin(), t.data().end());
    return make_output(
        shape, std::move(data), {t},
        [](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            add_into_grad(*nd.inputs[0], out_grad(o));
        },
        "reshape");
}

}  // namespace

Tensor softmax(const Tensor& t, int axis) {
    const int r = static_cast<int>(t.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ContractError("softmax: bad axis");
    if (r == 2 && axis == 0) return transpose(softmax(transpose(t), 1));
    if (axis != r - 1) throw ContractError("softmax: only the last axis (or 2-D axis 0) is supported");
    const int64_t cols = t.shape().back();
    if (r == 2) return softmax_impl(t, {}, false, "softmax");
    Tensor flat = softmax_impl(as_rows(t, cols), {}, false, "softmax");
    return reshape_like(flat, t.shape());
}

Tensor log_softmax(const Tensor& t, int axis) {
    const int r = static_cast<int>(t.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ContractError("log_softmax: bad axis");
    if (r == 2 && axis == 0) return transpose(log_softmax(transpose(t), 1));
    if (axis != r - 1) throw ContractError("log_softmax: only the last axis (or 2-D axis 0) is supported");
    const int64_t cols = t.shape().back();
    if (r == 2) return softmax_impl(t, {}, true, "log_softmax");
    Tensor flat = softmax_impl(as_rows(t, cols), {}, true, "log_softmax");
    return reshape_like(flat, t.shape());
}

Tensor masked_softmax_rows(const Tensor& t, std::span<const uint8_t> mask) {
    return softmax_impl(t, mask, false, "masked_softmax_rows");
}

Tensor masked_log_softmax_rows(const Tensor& t, std::span<const uint8_t> mask) {
    return softmax_impl(t, mask, true, "masked_log_softmax_rows");
}

// ---- norms ----

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
    require_2d(x, "rms_norm");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != cols) throw ContractError("rms_norm: gain shape mismatch");
    constexpr double kEps = 1e-6;
    std::vector<double> out(static_cast<size_t>(rows * cols));
    auto dx = x.data();
    auto dg = gain.data();
    for (int64_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (int64_t c = 0; c < cols; ++c) ms += dx[r * cols + c] * dx[r * cols + c];
        ms /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(ms + kEps);
        for (int64_t c = 0; c < cols; ++c) out[r * cols + c] = dx[r * cols + c] * inv * dg[c];
    }
    return make_output(
        {rows, cols}, std::move(out), {x, gain},
        [rows, cols](const Node& nd, TensorImpl& o) {
            auto g = out_grad(o);
            const auto& dx = nd.inputs[0]->data;
            const auto& dg = nd.inputs[1]->data;
            constexpr double kEps = 1e-6;
            const bool need_x = nd.inputs[0]->requires_grad;
            const bool need_g = nd.inputs[1]->requires_grad;
            if (need_x) detail::ensure_grad(*nd.inputs[0]);
            if (need_g) detail::ensure_grad(*nd.inputs[1]);
            for (int64_t r = 0; r < rows; ++r) {
                double ms = 0.0;
                for (int64_t c = 0; c < cols; ++c) ms += dx[r * cols + c] * dx[r * cols + c];
                ms /= static_cast<double>(cols);
                const double inv = 1.0 / std::sqrt(ms + kEps);
                if (need_g) {
                    for (int64_t c = 0; c < cols; ++c)
                        nd.inputs[1]->grad[c] += g[r * cols + c] * dx[r * cols + c] * inv;
                }
                if (need_x) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < cols; ++c)
                        dot += g[r * cols + c] * dg[c] * dx[r * cols + c];
                    const double k = dot * inv * inv * inv / static_cast<double>(cols);
                    for (int64_t c = 0; c < cols; ++c)
                        nd.inputs[0]->grad[r * cols + c] +=
                            g[r * cols + c] * dg[c] * inv - dx[r * cols + c] * k;
                }
            }
        },
        "rms_norm");
}

Tensor l2_normalize_rows(const Tensor& x) {
    require_2d(x, "l2_normalize_rows");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<size_t>(rows * cols));
    auto dx = x.data();
    for (int64_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (int64_t c = 0; c < cols; ++c) sq += dx[r * cols + c] * dx[r * cols + c];
        const double norm = std::sqrt(sq);
        if (norm < 1e-12) throw ContractError("l2_normalize_rows: degenerate zero-norm row");
        for (int64_t c = 0; c < cols; ++c) out[r * cols + c] = dx[r * cols + c] / norm;
    }
    return make_output(
        {rows, cols}, std::move(out), {x},
        [rows, cols](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            auto g = out_grad(o);
            const auto& y = o.data;
            const auto& dx = nd.inputs[0]->data;
            detail::ensure_grad(*nd.inputs[0]);
            for (int64_t r = 0; r < rows; ++r) {
                double sq = 0.0, dot = 0.0;
                for (int64_t c = 0; c < cols; ++c) {
                    sq += dx[r * cols + c] * dx[r * cols + c];
                    dot += g[r * cols + c] * y[r * cols + c];
                }
                const double inv = 1.0 / std::sqrt(sq);
                for (int64_t c = 0; c < cols; ++c)
                    nd.inputs[0]->grad[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) * inv;
            }
        },
        "l2_normalize_rows");
}

// ---- reductions / losses ----

Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data()) acc += v;
    return make_output(
        {1}, {acc}, {t},
        [](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            const double g = o.grad[0];
            detail::ensure_grad(*nd.inputs[0]);
            for (auto& v : nd.inputs[0]->grad) v += g;
        },
        "sum");
}

Tensor mean(const Tensor& t) { return scale(sum(t), 1.0 / static_cast<double>(t.numel())); }

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
    require_same_shape(pred, target, "smooth_l1");
    if (beta <= 0.0) throw ConfigError("smooth_l1: beta must be positive");
    const double inv_n = 1.0 / static_cast<double>(pred.numel());
    double acc = 0.0;
    auto dp = pred.data(), dt = target.data();
    for (size_t i = 0; i < dp.size(); ++i) {
        const double d = dp[i] - dt[i];
        const double a = std::abs(d);
        acc += (a < beta) ? 0.5 * d * d / beta : a - 0.5 * beta;
    }
    acc *= inv_n;
    return make_output(
        {1}, {acc}, {pred, target},
        [beta, inv_n](const Node& nd, TensorImpl& o) {
            const double g = o.grad[0] * inv_n;
            const auto& dp = nd.inputs[0]->data;
            const auto& dt = nd.inputs[1]->data;
            const bool np = nd.inputs[0]->requires_grad, nt = nd.inputs[1]->requires_grad;
            if (np) detail::ensure_grad(*nd.inputs[0]);
            if (nt) detail::ensure_grad(*nd.inputs[1]);
            for (size_t i = 0; i < dp.size(); ++i) {
                const double d = dp[i] - dt[i];
                const double dd = (std::abs(d) < beta) ? d / beta : (d > 0 ? 1.0 : -1.0);
                if (np) nd.inputs[0]->grad[i] += g * dd;
                if (nt) nd.inputs[1]->grad[i] -= g * dd;
            }
        },
        "smooth_l1");
}

Tensor cross_entropy(const Tensor& log_probs, const Tensor& target_probs) {
    require_same_shape(log_probs, target_probs, "cross_entropy");
    const int64_t rows = (log_probs.rank() == 1) ? 1 : log_probs.dim(0);
    const double inv_r = 1.0 / static_cast<double>(rows);
    double acc = 0.0;
    auto lp = log_probs.data(), q = target_probs.data();
    for (size_t i = 0; i < lp.size(); ++i) acc -= q[i] * lp[i];
    acc *= inv_r;
    return make_output(
        {1}, {acc}, {log_probs, target_probs},
        [inv_r](const Node& nd, TensorImpl& o) {
            const double g = o.grad[0] * inv_r;
            const auto& lp = nd.inputs[0]->data;
            const auto& q = nd.inputs[1]->data;
            if (nd.inputs[0]->requires_grad) {
                detail::ensure_grad(*nd.inputs[0]);
                for (size_t i = 0; i < lp.size(); ++i) nd.inputs[0]->grad[i] -= g * q[i];
            }
            if (nd.inputs[1]->requires_grad) {
                detail::ensure_grad(*nd.inputs[1]);
                for (size_t i = 0; i < lp.size(); ++i) nd.inputs[1]->grad[i] -= g * lp[i];
            }
        },
        "cross_entropy");
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "cosine_similarity");
    auto da = a.data(), db = b.data();
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (size_t i = 0; i < da.size(); ++i) {
        aa += da[i] * da[i];
        bb += db[i] * db[i];
        ab += da[i] * db[i];
    }
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na < 1e-12 || nb < 1e-12) throw ContractError("cosine_similarity: degenerate zero-norm input");
    const double s = ab / (na * nb);
    return make_output(
        {1}, {s}, {a, b},
        [na, nb, s](const Node& nd, TensorImpl& o) {
            const double g = o.grad[0];
            const auto& da = nd.inputs[0]->data;
            const auto& db = nd.inputs[1]->data;
            if (nd.inputs[0]->requires_grad) {
                detail::ensure_grad(*nd.inputs[0]);
                for (size_t i = 0; i < da.size(); ++i)
                    nd.inputs[0]->grad[i] += g * (db[i] / (na * nb) - s * da[i] / (na * na));
            }
            if (nd.inputs[1]->requires_grad) {
                detail::ensure_grad(*nd.inputs[1]);
                for (size_t i = 0; i < db.size(); ++i)
                    nd.inputs[1]->grad[i] += g * (da[i] / (na * nb) - s * db[i] / (nb * nb));
            }
        },
        "cosine_similarity");
}

Tensor pick_mean(const Tensor& t, std::span<const std::pair<int64_t, int64_t>> picks) {
    require_2d(t, "pick_mean");
    if (picks.empty()) throw ContractError("pick_mean: no entries selected");
    const int64_t rows = t.dim(0), cols = t.dim(1);
    double acc = 0.0;
    auto dt = t.data();
    for (const auto& [r, c] : picks) {
        if (r < 0 || r >= rows || c < 0 || c >= cols) throw ContractError("pick_mean: index out of range");
        acc += dt[r * cols + c];
    }
    const double inv_n = 1.0 / static_cast<double>(picks.size());
    std::vector<std::pair<int64_t, int64_t>> picks_copy(picks.begin(), picks.end());
    return make_output(
        {1}, {acc * inv_n}, {t},
        [picks_copy, cols, inv_n](const Node& nd, TensorImpl& o) {
            if (!nd.inputs[0]->requires_grad) return;
            const double g = o.grad[0] * inv_n;
            detail::ensure_grad(*nd.inputs[0]);
            for (const auto& [r, c] : picks_copy) nd.inputs[0]->grad[r * cols + c] += g;
        },
        "pick_mean");
}

// ---- backward ----

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) throw ContractError("backward: loss must be a scalar tensor");
    auto root = loss.impl();
    if (!root->node && !root->requires_grad) {
        throw ContractError("backward: loss is not connected to any requires_grad tensor");
    }
    // Collect reachable impls, ordered by node id for a deterministic sweep.
    std::vector<std::shared_ptr<TensorImpl>> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::shared_ptr<TensorImpl>> stack{root};
    while (!stack.empty()) {
        auto cur = stack.back();
        stack.pop_back();
        if (!cur->node || seen.count(cur.get())) continue;
        seen.insert(cur.get());
        order.push_back(cur);
        for (const auto& in : cur->node->inputs) stack.push_back(in);
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->node->id > b->node->id; });
    // Interior grads are scratch space for this pass; only leaf grads persist.
    for (const auto& impl : order) impl->grad.clear();
    detail::ensure_grad(*root);
    root->grad[0] = 1.0;
    for (const auto& impl : order) {
        if (impl->grad.empty()) continue;  // no gradient flowed here
        impl->node->backward_fn(*impl->node, *impl);
    }
}

}  // namespace speclab
