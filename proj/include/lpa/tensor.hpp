#pragma once

// Dense tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle onto shared storage. Ops that take at least one
// requires_grad input record a graph edge (the producing op's backward closure
// plus its inputs) on the output. backward() on a scalar root walks the graph in
// reverse topological order. Leaf grads accumulate across repeated backward()
// calls until zero_grad(); interior grads are reset at the start of each sweep.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lpa/error.hpp"

namespace lpa {

enum class DType : std::uint8_t { f32, f64 };

std::string to_string(DType dtype);
DType parse_dtype(const std::string& text);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Calls fn(T{}) with T = float or double according to dtype.
template <class Fn>
decltype(auto) visit_dtype(DType dtype, Fn&& fn) {
    if (dtype == DType::f32) {
        return fn(float{});
    }
    return fn(double{});
}

class Tensor;

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;

struct GraphNode {
    std::string op;
    std::vector<Tensor> inputs;
    // Reads out.grad and accumulates into the inputs' grads.
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f64;
    Buffer values;
    Buffer grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::shared_ptr<GraphNode> node;

    void ensure_grad();
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = DType::f64, bool requires_grad = false);
    static Tensor full(Shape shape, double value, DType dtype = DType::f64,
                       bool requires_grad = false);
    static Tensor from_values(Shape shape, std::span<const double> values,
                              DType dtype = DType::f64, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::initializer_list<double> values,
                              DType dtype = DType::f64, bool requires_grad = false);
    static Tensor scalar(double value, DType dtype = DType::f64, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    DType dtype() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;

    template <class T>
    std::span<T> data() {
        return std::get<std::vector<T>>(impl_->values);
    }
    template <class T>
    std::span<const T> data() const {
        return std::get<std::vector<T>>(impl_->values);
    }
    template <class T>
    std::span<T> grad_data() {
        impl_->ensure_grad();
        return std::get<std::vector<T>>(impl_->grad);
    }
    template <class T>
    std::span<const T> grad_data() const {
        if (!impl_->has_grad) {
            return {};
        }
        return std::get<std::vector<T>>(impl_->grad);
    }

    double at(std::size_t flat_index) const;
    void set(std::size_t flat_index, double value);
    double item() const;
    std::vector<double> to_vector() const;

    bool has_grad() const;
    /// Gradient as doubles; zeros if no grad has been accumulated yet.
    std::vector<double> grad_vector() const;
    void zero_grad();

    /// Returns a new leaf tensor with copied values and no graph history.
    Tensor detach() const;
    /// Copy of the values converted to another precision (leaf, no history).
    Tensor to(DType dtype) const;

    void backward() const;

    detail::TensorImpl& impl() const { return *impl_; }
    const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

    /// Identity comparison: true iff both handles share storage.
    bool same(const Tensor& other) const { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor make_result(Shape, DType, std::string, std::vector<Tensor>,
                              std::function<void(detail::TensorImpl&)>);

    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Whether ops record graph edges on this thread.
bool grad_enabled();

/// Disables graph recording for its lifetime (evaluation, generation, grad checks).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Allocates an op result. When grad mode is on and any input requires grad,
/// the result records `backward` and the inputs as its graph edge.
Tensor make_result(Shape shape, DType dtype, std::string op, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl&)> backward);

/// Common dtype of a set of op inputs; DimensionError on mismatch.
DType common_dtype(std::initializer_list<const Tensor*> tensors, const char* op);

/// Multiply-accumulate counter for matmul-family forwards.
///
/// One unit per scalar multiply-accumulate. Elementwise ops, norms, and softmax
/// cost nothing. Counts are kept per category; the active category is set with
/// FlopCategory. The counter is thread-local.
class FlopCounter {
public:
    static void enable(bool on);
    static bool enabled();
    static void reset();
    static void add(std::uint64_t macs);
    static std::uint64_t total();
    static std::uint64_t category(const std::string& name);

private:
    friend class FlopCategory;
    static void set_category(std::string name);
    static const std::string& current_category();
};

/// RAII: enables and resets the counter for a measured region, restoring the
/// previous enabled state afterwards. Counts remain readable after exit.
class FlopScope {
public:
    FlopScope();
    ~FlopScope();
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;

private:
    bool previous_;
};

/// RAII: attributes matmul MACs issued in its lifetime to `name`.
class FlopCategory {
public:
    explicit FlopCategory(std::string name);
    ~FlopCategory();
    FlopCategory(const FlopCategory&) = delete;
    FlopCategory& operator=(const FlopCategory&) = delete;

private:
    std::string previous_;
};

}  // namespace lpa
