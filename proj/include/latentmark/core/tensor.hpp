#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace latentmark {

// Dense row-major float tensor. Shapes follow the [N, C, H, W] convention for
// image data and [N, D] for feature vectors; rank is arbitrary.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), 0.0f);
    }
    Tensor(std::vector<int> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<size_t>(count(shape_)) != data_.size())
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }
    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return count(shape_); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 4-d accessor for [N, C, H, W] tensors.
    float& at4(int n, int c, int h, int w) {
        return data_[static_cast<size_t>(((int64_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    float at4(int n, int c, int h, int w) const {
        return data_[static_cast<size_t>(((int64_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    float& at2(int i, int j) { return data_[static_cast<size_t>(int64_t(i) * shape_[1] + j)]; }
    float at2(int i, int j) const { return data_[static_cast<size_t>(int64_t(i) * shape_[1] + j)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> new_shape) const {
        if (count(new_shape) != numel())
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        return Tensor(std::move(new_shape), data_);
    }

    void fill(float v) {
        for (auto& x : data_) x = v;
    }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape);
    std::string shape_str() const { return shape_str(shape_); }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

}  // namespace latentmark
