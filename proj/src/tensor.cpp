#include "kd/tensor.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <sstream>

namespace kd {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) {
    if (extent <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Storage>()) {
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(n, T(0));
  impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<Storage>()) {
  const auto n = shape_numel(shape);
  if (n != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(n) +
                         " elements, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data.assign(data.begin(), data.end());
  impl_->requires_grad = requires_grad;
}

template <class T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <class T>
std::span<T> Tensor<T>::grad() {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  impl_->grad.assign(impl_->data.size(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(impl_->shape, impl_->requires_grad);
  out.impl_->data = impl_->data;
  return out;
}

template <class T>
bool Graph<T>::wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}

template <class T>
std::size_t Graph<T>::id_of(const Tensor<T>& t) const {
  for (std::size_t i = records_.size(); i-- > 0;) {
    if (records_[i].output.same_storage(t)) return i;
  }
  return static_cast<std::size_t>(-1);
}

template <class T>
void Graph<T>::record(std::string_view op, std::vector<const Tensor<T>*> inputs, Tensor<T>& output,
                      std::function<void()> backward) {
  Record rec;
  rec.op = op;
  for (const auto* in : inputs) rec.input_ids.push_back(id_of(*in));
  output.set_requires_grad(true);
  rec.output = output;
  rec.backward = std::move(backward);
  records_.push_back(std::move(rec));
}

template <class T>
void Graph<T>::backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.grad()[0] += T(1);
  visited_ = 0;
  for (std::size_t i = records_.size(); i-- > 0;) {
    auto& rec = records_[i];
    ++visited_;
    if (!rec.output.has_grad()) continue;
    rec.backward();
    // Intermediate gradients are no longer needed once propagated.
    rec.output.drop_grad();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace kd
