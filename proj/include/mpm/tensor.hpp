#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mpm {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor of T with an optional gradient buffer. Value-semantic
// handle: copies share storage, which is what lets tape closures see gradient
// accumulation from later ops.
template <typename T>
class Tensor {
    struct Storage {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until ensure_grad()
        bool requires_grad = false;
    };

   public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false) : p_(std::make_shared<Storage>()) {
        p_->shape = std::move(shape);
        p_->data.assign(shape_numel(p_->shape), T(0));
        p_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        Tensor t;
        t.p_ = std::make_shared<Storage>();
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        t.p_->shape = std::move(shape);
        t.p_->data = std::move(values);
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    size_t rank() const { return p_->shape.size(); }
    size_t numel() const { return p_->data.size(); }
    size_t dim(size_t i) const { return p_->shape[i]; }

    std::vector<T>& data() { return p_->data; }
    const std::vector<T>& data() const { return p_->data; }
    std::vector<T>& grad() { return p_->grad; }
    const std::vector<T>& grad() const { return p_->grad; }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool v) { p_->requires_grad = v; }

    bool has_grad() const { return !p_->grad.empty(); }
    void ensure_grad() {
        if (p_->grad.empty()) p_->grad.assign(p_->data.size(), T(0));
    }
    void zero_grad() {
        if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), T(0));
    }

    // Identity of the underlying storage; two handles alias iff equal.
    const void* id() const { return p_.get(); }

    Tensor clone() const {
        Tensor t;
        t.p_ = std::make_shared<Storage>(*p_);
        return t;
    }

   private:
    std::shared_ptr<Storage> p_;
};

// Records one backward closure per op, replayed strictly in reverse order, so
// each recorded node runs exactly once and fan-out gradients accumulate
// additively in the shared buffers.
template <typename T>
class Tape {
   public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void record(std::function<void()> backward_fn) {
        if (recording_) nodes_.push_back(std::move(backward_fn));
    }

    void run_backward(Tensor<T>& loss) {
        if (consumed_) throw std::logic_error("backward: tape already consumed; build a fresh tape");
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        consumed_ = true;
        loss.ensure_grad();
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

   private:
    std::vector<std::function<void()>> nodes_;
    bool recording_;
    bool consumed_ = false;
};

// Populates grad buffers of every requires_grad tensor reachable from loss.
template <typename T>
inline void backward(Tensor<T> loss, Tape<T>& tape) {
    tape.run_backward(loss);
}

}  // namespace mpm
