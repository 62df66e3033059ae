#include "octcvd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace octcvd {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d < 0) throw std::invalid_argument("tensor shape has negative dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
}

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("tensor data length does not match shape product");
}

Tensor Tensor::full(std::vector<std::int64_t> s, double v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void Tensor::require_finite(const char* ctx) const {
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            std::ostringstream os;
            os << ctx << ": non-finite value at flat index " << i << " of tensor " << shape_str();
            throw std::runtime_error(os.str());
        }
    }
}

namespace {
int g_workers = 1;
}

void set_num_workers(int workers) { g_workers = workers < 1 ? 1 : workers; }
int num_workers() { return g_workers; }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
    int w = g_workers;
    if (w <= 1 || n == 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (static_cast<std::int64_t>(w) > n) w = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(w));
    std::int64_t chunk = (n + w - 1) / w;
    for (int t = 0; t < w; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn]() {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace octcvd
