#pragma once

#include <cstddef>
#include <new>
#include <numeric>
#include <vector>

namespace kstone::nn {

/// Cache-line aligned storage, so vectorized kernels see the same alignment on
/// every run and results do not depend on where the heap placed a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense row-major float tensor. Images use NCHW.
struct Tensor {
    std::vector<int> shape;
    FloatBuffer data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.f) : shape(std::move(s)), data(count(shape), fill) {}

    static std::size_t count(const std::vector<int>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

    std::size_t numel() const { return data.size(); }
    int dim(std::size_t i) const { return shape[i]; }
    int rank() const { return static_cast<int>(shape.size()); }
    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    bool operator==(const Tensor&) const = default;
};

} // namespace kstone::nn
