#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "kd/errors.hpp"

namespace kd {

enum class DType { float32, float64 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

using Shape = std::vector<std::int64_t>;

// 64-byte aligned buffers. Vectorized kernels peel unaligned heads with scalar
// code, so unaligned storage would make results depend on heap addresses.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);

// Keeps freed activation buffers in the heap instead of returning them to the
// OS; every training step reallocates the same sizes. No-op off glibc.
void tune_allocator();
std::string shape_str(const Shape& shape);

// Dense row-major tensor with an optional gradient buffer.
//
// Tensor is a handle: copies share storage. Use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  static constexpr DType dtype = dtype_of<T>();

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zero gradient buffer if none exists yet.
  std::span<T> grad();
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();
  void drop_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    AlignedVector<T> data;
    AlignedVector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

// Records operations in execution order so they can be differentiated in
// reverse. Insertion order is a topological order: every record's inputs were
// produced before it.
template <class T>
class Graph {
 public:
  struct Record {
    std::string_view op;
    std::vector<std::size_t> input_ids;
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  // True when at least one input needs a gradient and recording is on.
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const;

  // Registers an op. The output is marked requires_grad.
  void record(std::string_view op, std::vector<const Tensor<T>*> inputs,
              Tensor<T>& output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure in
  // reverse order. The loss must be a single-element tensor.
  void backward(Tensor<T>& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  // Number of backward closures executed by the last backward() call.
  std::size_t visited() const { return visited_; }

 private:
  std::size_t id_of(const Tensor<T>& t) const;

  bool recording_;
  std::vector<Record> records_;
  std::size_t visited_ = 0;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace kd
