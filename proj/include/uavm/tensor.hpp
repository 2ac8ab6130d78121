#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uavm/errors.hpp"
#include "uavm/rng.hpp"

namespace uavm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename S>
class Tape;

// Dense row-major tensor with an optional gradient buffer. Copies are
// shallow (storage is shared); clone() detaches. Gradients are accumulated
// by tape replay, so callers zero them before a fresh forward/backward.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<S>>(shape_numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
        if (values.size() != shape_numel(shape_)) {
            throw shape_error("tensor init: " + std::to_string(values.size()) +
                              " values for shape " + shape_str(shape_));
        }
        data_ = std::make_shared<std::vector<S>>(std::move(values));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }

    static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : *t.data_) v = static_cast<S>(dist(rng)) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool defined() const { return data_ != nullptr; }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_[1]; }

    std::span<S> values() { return {data_->data(), data_->size()}; }
    std::span<const S> values() const { return {data_->data(), data_->size()}; }

    S& at(std::size_t i) { return (*data_)[i]; }
    S at(std::size_t i) const { return (*data_)[i]; }
    S& operator()(std::size_t r, std::size_t c) { return (*data_)[r * shape_[1] + c]; }
    S operator()(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }

    bool requires_grad() const { return requires_grad_; }

    Tensor& set_requires_grad(bool b) {
        requires_grad_ = b;
        if (b && !grad_) grad_ = std::make_shared<std::vector<S>>(numel(), S(0));
        return *this;
    }

    bool has_grad() const { return grad_ != nullptr; }

    // Gradient buffer. Shared storage, so writes through copies are visible
    // everywhere; tape closures rely on this.
    std::span<S> grad_span() const {
        if (!grad_) throw config_error("tensor has no gradient buffer; call backward() first");
        return {grad_->data(), grad_->size()};
    }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), S(0));
    }

    // Deep copy of the values only; the clone does not participate in autodiff.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<S>>(*data_);
        return t;
    }

    bool same_values(const Tensor& other) const {
        return shape_ == other.shape_ && *data_ == *other.data_;
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<S>> data_;
    std::shared_ptr<std::vector<S>> grad_;
    bool requires_grad_ = false;
};

// Reverse-mode tape: an ordered list of backward rules recorded by forward
// operations. Replaying them in reverse order accumulates d(loss)/d(input)
// into every recorded input's gradient buffer. Single-use: a second
// backward() without a fresh forward is an error.
template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }
    std::size_t size() const { return rules_.size(); }

    void backward(Tensor<S>& loss) {
        if (used_) throw config_error("tape already replayed; run a new forward pass first");
        if (loss.numel() != 1) {
            throw config_error("backward() needs a scalar loss, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw config_error("loss does not depend on any recorded operation");
        }
        used_ = true;
        loss.grad_span()[0] = S(1);
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    }

    static Tape*& current() {
        thread_local Tape* cur = nullptr;
        return cur;
    }

private:
    std::vector<std::function<void()>> rules_;
    bool used_ = false;
};

// Activates a tape for the current thread for the lifetime of the scope.
template <typename S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::current()) { Tape<S>::current() = &tape; }
    ~TapeScope() { Tape<S>::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

namespace detail {

template <typename S>
bool taping(std::initializer_list<const Tensor<S>*> inputs) {
    if (!Tape<S>::current()) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    }
}

template <typename S>
void check_matrix(const Tensor<S>& t, const char* op) {
    if (t.ndim() != 2) {
        throw shape_error(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

// c(m x n) += a(m x k) . b(k x n)
template <typename S>
void mm_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const S av = a[i * k + p];
            const S* brow = b + p * n;
            S* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// da(m x k) += dc(m x n) . b(k x n)^T
template <typename S>
void mm_acc_nt(const S* dc, const S* b, S* da, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* dcrow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S* brow = b + p * n;
            S acc = S(0);
            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            da[i * k + p] += acc;
        }
    }
}

// db(k x n) += a(m x k)^T . dc(m x n)
template <typename S>
void mm_acc_tn(const S* a, const S* dc, S* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* dcrow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = a[i * k + p];
            S* dbrow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
    for (S v : t.values()) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw numeric_error(std::string(op) + ": non-finite input value");
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (detail::taping<S>({&a, &b})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, b, out] {
            auto g = out.grad_span();
            if (a.requires_grad()) {
                auto ga = a.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (detail::taping<S>({&a, &b})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, b, out] {
            auto g = out.grad_span();
            if (a.requires_grad()) {
                auto ga = a.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (detail::taping<S>({&a, &b})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, b, out] {
            auto g = out.grad_span();
            auto av2 = a.values(), bv2 = b.values();
            if (a.requires_grad()) {
                auto ga = a.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    Tensor<S> out(a.shape());
    auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
    if (detail::taping<S>({&a})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, out, factor] {
            auto g = out.grad_span();
            auto ga = a.grad_span();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
        });
    }
    return out;
}

// x(T x D) + row vector b(D), broadcast over rows.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
    detail::check_matrix(x, "add_rowvec");
    if (b.numel() != x.cols()) {
        throw shape_error("add_rowvec: row vector " + shape_str(b.shape()) +
                          " does not match matrix " + shape_str(x.shape()));
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor<S> out(x.shape());
    auto xv = x.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + bv[j];
    if (detail::taping<S>({&x, &b})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, b, out, r, c] {
            auto g = out.grad_span();
            if (x.requires_grad()) {
                auto gx = x.grad_span();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_span();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const double v = static_cast<double>(xv[i]);
        ov[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    if (detail::taping<S>({&x})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, out] {
            auto g = out.grad_span();
            auto xv2 = x.values();
            auto gx = x.grad_span();
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(xv2[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * static_cast<S>(cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_matrix(a, "matmul");
    detail::check_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<S> out(Shape{m, n});
    detail::mm_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    if (detail::taping<S>({&a, &b})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, b, out, m, k, n] {
            auto g = out.grad_span();
            if (a.requires_grad())
                detail::mm_acc_nt(g.data(), b.values().data(), a.grad_span().data(), m, n, k);
            if (b.requires_grad())
                detail::mm_acc_tn(a.values().data(), g.data(), b.grad_span().data(), m, k, n);
        });
    }
    return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    detail::check_matrix(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    Tensor<S> out(Shape{c, r});
    auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ov[j * r + i] = av[i * c + j];
    if (detail::taping<S>({&a})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, out, r, c] {
            auto g = out.grad_span();
            auto ga = a.grad_span();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        });
    }
    return out;
}

// x(T x Din) . w(Din x Dout) + b(Dout)
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    return add_rowvec(matmul(x, w), b);
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t c0, std::size_t len) {
    detail::check_matrix(x, "slice_cols");
    if (c0 + len > x.cols() || len == 0) {
        throw shape_error("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c0 + len) +
                          ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor<S> out(Shape{r, len});
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) ov[i * len + j] = xv[i * c + c0 + j];
    if (detail::taping<S>({&x})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, out, c0, len, r, c] {
            auto g = out.grad_span();
            auto gx = x.grad_span();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < len; ++j) gx[i * c + c0 + j] += g[i * len + j];
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw shape_error("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::check_matrix(p, "concat_cols");
        if (p.rows() != r) {
            throw shape_error("concat_cols: row mismatch " + shape_str(parts[0].shape()) +
                              " vs " + shape_str(p.shape()));
        }
        total += p.cols();
    }
    Tensor<S> out(Shape{r, total});
    auto ov = out.values();
    std::size_t off = 0;
    for (const auto& p : parts) {
        auto pv = p.values();
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) ov[i * total + off + j] = pv[i * pc + j];
        off += pc;
    }
    bool any_grad = false;
    for (const auto& p : parts)
        if (p.requires_grad()) any_grad = true;
    if (Tape<S>::current() && any_grad) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([parts, out, r, total] {
            auto g = out.grad_span();
            std::size_t off2 = 0;
            for (const auto& p : parts) {
                const std::size_t pc = p.cols();
                if (p.requires_grad()) {
                    auto gp = p.grad_span();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * total + off2 + j];
                }
                off2 += pc;
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_matrix(a, "concat_rows");
    detail::check_matrix(b, "concat_rows");
    if (a.cols() != b.cols()) {
        throw shape_error("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
    const std::size_t c = a.cols();
    Tensor<S> out(Shape{a.rows() + b.rows(), c});
    auto ov = out.values();
    std::copy(a.values().begin(), a.values().end(), ov.begin());
    std::copy(b.values().begin(), b.values().end(), ov.begin() + a.numel());
    if (detail::taping<S>({&a, &b})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([a, b, out] {
            auto g = out.grad_span();
            if (a.requires_grad()) {
                auto ga = a.grad_span();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_span();
                const std::size_t off = a.numel();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// Column means of a matrix: (T x D) -> (1 x D).
template <typename S>
Tensor<S> mean_rows(const Tensor<S>& x) {
    detail::check_matrix(x, "mean_rows");
    const std::size_t r = x.rows(), c = x.cols();
    if (r == 0) throw shape_error("mean_rows: empty matrix");
    Tensor<S> out(Shape{1, c});
    auto xv = x.values();
    auto ov = out.values();
    const S inv = S(1) / static_cast<S>(r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ov[j] += xv[i * c + j] * inv;
    if (detail::taping<S>({&x})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, out, r, c, inv] {
            auto g = out.grad_span();
            auto gx = x.grad_span();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j] * inv;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    const std::size_t n = x.numel();
    if (n == 0) throw shape_error("mean_all: empty tensor");
    Tensor<S> out(Shape{1});
    auto xv = x.values();
    S acc = S(0);
    for (S v : xv) acc += v;
    const S inv = S(1) / static_cast<S>(n);
    out.at(0) = acc * inv;
    if (detail::taping<S>({&x})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, out, inv] {
            const S g = out.grad_span()[0];
            auto gx = x.grad_span();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * inv;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalizations
// ---------------------------------------------------------------------------

namespace detail {

// Lanes along `axis` of a 1-D or 2-D tensor, as (start offset, stride, length).
struct LaneIter {
    std::size_t lanes, stride, len, lane_step;
};

template <typename S>
LaneIter lanes_for(const Tensor<S>& x, std::size_t axis, const char* op) {
    if (x.ndim() == 1) {
        if (axis != 0) throw shape_error(std::string(op) + ": axis out of range for vector");
        return {1, 1, x.numel(), 0};
    }
    if (x.ndim() != 2) throw shape_error(std::string(op) + ": only 1-D/2-D supported");
    const std::size_t r = x.rows(), c = x.cols();
    if (axis == 1) return {r, 1, c, c};       // one lane per row
    if (axis == 0) return {c, c, r, 1};       // one lane per column
    throw shape_error(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
}

}  // namespace detail

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
    const auto it = detail::lanes_for(x, axis, "softmax");
    detail::check_finite(x, "softmax");
    Tensor<S> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t l = 0; l < it.lanes; ++l) {
        const std::size_t base = l * it.lane_step;
        S mx = xv[base];
        for (std::size_t i = 1; i < it.len; ++i) mx = std::max(mx, xv[base + i * it.stride]);
        S denom = S(0);
        for (std::size_t i = 0; i < it.len; ++i) {
            const S e = std::exp(xv[base + i * it.stride] - mx);
            ov[base + i * it.stride] = e;
            denom += e;
        }
        const S inv = S(1) / denom;
        for (std::size_t i = 0; i < it.len; ++i) ov[base + i * it.stride] *= inv;
    }
    if (detail::taping<S>({&x})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, out, it] {
            auto g = out.grad_span();
            auto yv = out.values();
            auto gx = x.grad_span();
            for (std::size_t l = 0; l < it.lanes; ++l) {
                const std::size_t base = l * it.lane_step;
                S dot = S(0);
                for (std::size_t i = 0; i < it.len; ++i) {
                    const std::size_t k = base + i * it.stride;
                    dot += g[k] * yv[k];
                }
                for (std::size_t i = 0; i < it.len; ++i) {
                    const std::size_t k = base + i * it.stride;
                    gx[k] += yv[k] * (g[k] - dot);
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, std::size_t axis) {
    const auto it = detail::lanes_for(x, axis, "log_softmax");
    detail::check_finite(x, "log_softmax");
    Tensor<S> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t l = 0; l < it.lanes; ++l) {
        const std::size_t base = l * it.lane_step;
        S mx = xv[base];
        for (std::size_t i = 1; i < it.len; ++i) mx = std::max(mx, xv[base + i * it.stride]);
        S denom = S(0);
        for (std::size_t i = 0; i < it.len; ++i) denom += std::exp(xv[base + i * it.stride] - mx);
        const S lse = mx + std::log(denom);
        for (std::size_t i = 0; i < it.len; ++i) {
            const std::size_t k = base + i * it.stride;
            ov[k] = xv[k] - lse;
        }
    }
    if (detail::taping<S>({&x})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, out, it] {
            auto g = out.grad_span();
            auto yv = out.values();
            auto gx = x.grad_span();
            for (std::size_t l = 0; l < it.lanes; ++l) {
                const std::size_t base = l * it.lane_step;
                S gsum = S(0);
                for (std::size_t i = 0; i < it.len; ++i) gsum += g[base + i * it.stride];
                for (std::size_t i = 0; i < it.len; ++i) {
                    const std::size_t k = base + i * it.stride;
                    gx[k] += g[k] - std::exp(yv[k]) * gsum;
                }
            }
        });
    }
    return out;
}

// Per-row standardization of x(T x D) with affine gain/bias of length D.
// Population variance, eps-guarded.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
    detail::check_matrix(x, "layer_norm");
    if (eps <= S(0)) throw config_error("layer_norm: eps must be positive");
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c) {
        throw shape_error("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                          shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
    }
    Tensor<S> out(x.shape());
    Tensor<S> xhat(x.shape());   // saved for backward
    std::vector<S> inv_std(r);
    auto xv = x.values();
    auto gv = gain.values(), bv = bias.values();
    auto ov = out.values();
    auto hv = xhat.values();
    for (std::size_t i = 0; i < r; ++i) {
        S mean = S(0);
        for (std::size_t j = 0; j < c; ++j) mean += xv[i * c + j];
        mean /= static_cast<S>(c);
        S var = S(0);
        for (std::size_t j = 0; j < c; ++j) {
            const S d = xv[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(c);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const S h = (xv[i * c + j] - mean) * is;
            hv[i * c + j] = h;
            ov[i * c + j] = gv[j] * h + bv[j];
        }
    }
    if (detail::taping<S>({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([x, gain, bias, out, xhat, inv_std, r, c] {
            auto g = out.grad_span();
            auto hv2 = xhat.values();
            auto gv2 = gain.values();
            if (gain.requires_grad()) {
                auto gg = gain.grad_span();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * hv2[i * c + j];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_span();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
            }
            if (x.requires_grad()) {
                auto gx = x.grad_span();
                for (std::size_t i = 0; i < r; ++i) {
                    S sum_dh = S(0), sum_dh_h = S(0);
                    for (std::size_t j = 0; j < c; ++j) {
                        const S dh = g[i * c + j] * gv2[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hv2[i * c + j];
                    }
                    const S invc = S(1) / static_cast<S>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const S dh = g[i * c + j] * gv2[j];
                        gx[i * c + j] += inv_std[i] *
                            (dh - invc * sum_dh - hv2[i * c + j] * invc * sum_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses (targets are plain data, not differentiated)
// ---------------------------------------------------------------------------

// -sum(t * log_softmax(z)) over a logits row (1 x C or C). Targets must be a
// finite weighting of the classes (soft labels sum to 1 in single-label mode).
template <typename S>
Tensor<S> cross_entropy_soft(const Tensor<S>& logits, const std::vector<S>& targets) {
    if (logits.numel() != targets.size()) {
        throw shape_error("cross_entropy_soft: logits " + shape_str(logits.shape()) + " vs " +
                          std::to_string(targets.size()) + " targets");
    }
    detail::check_finite(logits, "cross_entropy_soft");
    const std::size_t n = logits.numel();
    auto zv = logits.values();
    S mx = zv[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, zv[i]);
    S denom = S(0);
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(zv[i] - mx);
    const S lse = mx + std::log(denom);
    S loss = S(0);
    for (std::size_t i = 0; i < n; ++i) loss -= targets[i] * (zv[i] - lse);
    Tensor<S> out(Shape{1});
    out.at(0) = loss;
    if (detail::taping<S>({&logits})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([logits, targets, out, lse, n] {
            const S g = out.grad_span()[0];
            auto zv2 = logits.values();
            auto gz = logits.grad_span();
            S tsum = S(0);
            for (std::size_t i = 0; i < n; ++i) tsum += targets[i];
            for (std::size_t i = 0; i < n; ++i) {
                gz[i] += g * (std::exp(zv2[i] - lse) * tsum - targets[i]);
            }
        });
    }
    return out;
}

// Mean over entries of max(z,0) - z*t + log(1 + exp(-|z|)).
template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const std::vector<S>& targets) {
    if (logits.numel() != targets.size()) {
        throw shape_error("bce_with_logits: logits " + shape_str(logits.shape()) + " vs " +
                          std::to_string(targets.size()) + " targets");
    }
    detail::check_finite(logits, "bce_with_logits");
    const std::size_t n = logits.numel();
    auto zv = logits.values();
    S loss = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        const S z = zv[i];
        loss += std::max(z, S(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    const S inv = S(1) / static_cast<S>(n);
    Tensor<S> out(Shape{1});
    out.at(0) = loss * inv;
    if (detail::taping<S>({&logits})) {
        out.set_requires_grad(true);
        Tape<S>::current()->record([logits, targets, out, inv, n] {
            const S g = out.grad_span()[0];
            auto zv2 = logits.values();
            auto gz = logits.grad_span();
            for (std::size_t i = 0; i < n; ++i) {
                const S sig = S(1) / (S(1) + std::exp(-zv2[i]));
                gz[i] += g * (sig - targets[i]) * inv;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// Scaled dot-product self-attention over x(T x D) with per-head splitting.
// Returns the output tokens and one row-stochastic T x T probability matrix
// per head (detached copies, safe to keep in traces).
template <typename S>
std::pair<Tensor<S>, std::vector<Tensor<S>>> multi_head_attention(
    const Tensor<S>& x,
    const Tensor<S>& wq, const Tensor<S>& bq,
    const Tensor<S>& wk, const Tensor<S>& bk,
    const Tensor<S>& wv, const Tensor<S>& bv,
    const Tensor<S>& wo, const Tensor<S>& bo,
    std::size_t num_heads) {
    detail::check_matrix(x, "multi_head_attention");
    const std::size_t d_model = x.cols();
    if (num_heads == 0 || d_model % num_heads != 0) {
        throw config_error("multi_head_attention: model dim " + std::to_string(d_model) +
                           " not divisible by " + std::to_string(num_heads) + " heads");
    }
    const std::size_t d_head = d_model / num_heads;
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d_head));

    Tensor<S> q = linear(x, wq, bq);
    Tensor<S> k = linear(x, wk, bk);
    Tensor<S> v = linear(x, wv, bv);

    std::vector<Tensor<S>> head_outs;
    std::vector<Tensor<S>> maps;
    head_outs.reserve(num_heads);
    maps.reserve(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        Tensor<S> qh = slice_cols(q, h * d_head, d_head);
        Tensor<S> kh = slice_cols(k, h * d_head, d_head);
        Tensor<S> vh = slice_cols(v, h * d_head, d_head);
        Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
        Tensor<S> probs = softmax(scores, 1);
        maps.push_back(probs.clone());
        head_outs.push_back(matmul(probs, vh));
    }
    Tensor<S> out = linear(concat_cols(head_outs), wo, bo);
    return {std::move(out), std::move(maps)};
}

}  // namespace uavm
