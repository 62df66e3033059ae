#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace octcvd {

// Dense row-major array of 64-bit floats. The whole stack runs in double
// precision so gradient checks resolve cleanly.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s);
    Tensor(std::vector<std::int64_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<std::int64_t> s, double v);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;

    double& at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    double at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    double& at2(std::int64_t i, std::int64_t j) {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }
    double at2(std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }

    void fill(double v);
    // Throws if any element is NaN/Inf; ctx names the producing operation.
    void require_finite(const char* ctx) const;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

// Runs fn(i) for i in [0, n) split across the worker pool. Each index is
// processed by exactly one thread, so as long as distinct indices write to
// disjoint memory the result is identical for any worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);
void set_num_workers(int workers);
int num_workers();

}  // namespace octcvd
