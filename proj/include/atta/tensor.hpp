#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace atta {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Dense row-major float tensor. CHW layout for images and feature maps.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0f) {}

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static int count(const std::vector<int>& s) {
        int n = 1;
        for (int v : s) {
            if (v <= 0) throw ShapeError("tensor dimension must be positive");
            n *= v;
        }
        return n;
    }

    int numel() const { return static_cast<int>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    // 3-D accessors (c, y, x) for CHW tensors.
    float& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_bits(const Tensor& other) const {
        if (shape != other.shape) return false;
        for (size_t i = 0; i < data.size(); ++i)
            if (std::bit_cast<uint32_t>(data[i]) != std::bit_cast<uint32_t>(other.data[i]))
                return false;
        return true;
    }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace atta
