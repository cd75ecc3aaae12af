#include "lpa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lpa {

namespace {

#if defined(__GLIBC__)
// Activation buffers are freed and reallocated every step. Keep them on the
// heap instead of mapping and unmapping pages each time.
const bool kHeapTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif

}  // namespace

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& text) {
    if (text == "f32") {
        return DType::f32;
    }
    if (text == "f64") {
        return DType::f64;
    }
    throw ConfigError("unknown precision '" + text + "' (expected f32 or f64)");
}

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) {
        n *= s;
    }
    return n;
}

namespace detail {

static Buffer make_buffer(DType dtype, std::size_t n) {
    if (dtype == DType::f32) {
        return std::vector<float>(n, 0.0f);
    }
    return std::vector<double>(n, 0.0);
}

void TensorImpl::ensure_grad() {
    if (!has_grad) {
        grad = make_buffer(dtype, shape_numel(shape));
        has_grad = true;
    }
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, DType dtype, bool requires_grad) {
    for (auto s : shape) {
        if (s == 0) {
            throw DimensionError("tensor dims must be positive, got " + shape_to_string(shape));
        }
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->dtype = dtype;
    const auto n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->values = detail::make_buffer(dtype, n);
    impl->requires_grad = requires_grad;
    return impl;
}

thread_local bool t_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
    return Tensor(new_impl(std::move(shape), dtype, requires_grad));
}

Tensor Tensor::full(Shape shape, double value, DType dtype, bool requires_grad) {
    Tensor t = zeros(std::move(shape), dtype, requires_grad);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.data<T>();
        std::fill(d.begin(), d.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype,
                           bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_to_string(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    Tensor t = zeros(std::move(shape), dtype, requires_grad);
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.data<T>();
        for (std::size_t i = 0; i < values.size(); ++i) {
            d[i] = static_cast<T>(values[i]);
        }
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype,
                           bool requires_grad) {
    return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                       dtype, requires_grad);
}

Tensor Tensor::scalar(double value, DType dtype, bool requires_grad) {
    return from_values({1}, {value}, dtype, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_to_string(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return shape_numel(impl_->shape); }

DType Tensor::dtype() const { return impl_->dtype; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

double Tensor::at(std::size_t flat_index) const {
    return visit_dtype(dtype(), [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(data<T>()[flat_index]);
    });
}

void Tensor::set(std::size_t flat_index, double value) {
    visit_dtype(dtype(), [&](auto tag) {
        using T = decltype(tag);
        data<T>()[flat_index] = static_cast<T>(value);
    });
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() needs a single-element tensor, got " +
                            shape_to_string(shape()));
    }
    return at(0);
}

std::vector<double> Tensor::to_vector() const {
    return visit_dtype(dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto d = data<T>();
        return std::vector<double>(d.begin(), d.end());
    });
}

bool Tensor::has_grad() const { return impl_->has_grad; }

std::vector<double> Tensor::grad_vector() const {
    if (!impl_->has_grad) {
        return std::vector<double>(numel(), 0.0);
    }
    return visit_dtype(dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto g = grad_data<T>();
        return std::vector<double>(g.begin(), g.end());
    });
}

void Tensor::zero_grad() {
    if (!impl_->has_grad) {
        return;
    }
    std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, impl_->grad);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->values = impl_->values;
    return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
    Tensor out = zeros(shape(), target);
    visit_dtype(dtype(), [&](auto src_tag) {
        using S = decltype(src_tag);
        visit_dtype(target, [&](auto dst_tag) {
            using D = decltype(dst_tag);
            auto src = data<S>();
            auto dst = out.data<D>();
            for (std::size_t i = 0; i < src.size(); ++i) {
                dst[i] = static_cast<D>(src[i]);
            }
        });
    });
    return out;
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() needs a scalar root, got shape " +
                            shape_to_string(shape()));
    }

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> visited;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto& edge = node->node;
        if (edge && next < edge->inputs.size()) {
            detail::TensorImpl* child = edge->inputs[next].impl_ptr().get();
            ++next;
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (auto* node : order) {
        if (node->node) {
            node->ensure_grad();
            std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, node->grad);
        }
    }
    impl_->ensure_grad();
    std::visit([](auto& v) { v[0] += 1; }, impl_->grad);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->node && node->node->backward) {
            node->node->backward(*node);
        }
    }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, DType dtype, std::string op, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl&)> backward) {
    bool needs_grad = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs) {
            needs_grad = needs_grad || in.requires_grad();
        }
    }
    auto impl = new_impl(std::move(shape), dtype, needs_grad);
    if (needs_grad) {
        auto node = std::make_shared<detail::GraphNode>();
        node->op = std::move(op);
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

DType common_dtype(std::initializer_list<const Tensor*> tensors, const char* op) {
    const DType first = (*tensors.begin())->dtype();
    for (const Tensor* t : tensors) {
        if (t->dtype() != first) {
            throw DimensionError(std::string(op) + ": mixed precisions " + to_string(first) +
                                 " and " + to_string(t->dtype()));
        }
    }
    return first;
}

namespace {

struct FlopState {
    bool enabled = false;
    std::string category = "other";
    std::map<std::string, std::uint64_t> counts;
};

thread_local FlopState t_flops;

}  // namespace

void FlopCounter::enable(bool on) { t_flops.enabled = on; }

bool FlopCounter::enabled() { return t_flops.enabled; }

void FlopCounter::reset() { t_flops.counts.clear(); }

void FlopCounter::add(std::uint64_t macs) {
    if (t_flops.enabled) {
        t_flops.counts[t_flops.category] += macs;
    }
}

std::uint64_t FlopCounter::total() {
    std::uint64_t sum = 0;
    for (const auto& [name, n] : t_flops.counts) {
        sum += n;
    }
    return sum;
}

std::uint64_t FlopCounter::category(const std::string& name) {
    auto it = t_flops.counts.find(name);
    return it == t_flops.counts.end() ? 0 : it->second;
}

void FlopCounter::set_category(std::string name) { t_flops.category = std::move(name); }

const std::string& FlopCounter::current_category() { return t_flops.category; }

FlopScope::FlopScope() : previous_(FlopCounter::enabled()) {
    FlopCounter::reset();
    FlopCounter::enable(true);
}

FlopScope::~FlopScope() { FlopCounter::enable(previous_); }

FlopCategory::FlopCategory(std::string name) : previous_(FlopCounter::current_category()) {
    FlopCounter::set_category(std::move(name));
}

FlopCategory::~FlopCategory() { FlopCounter::set_category(previous_); }

}  // namespace lpa
