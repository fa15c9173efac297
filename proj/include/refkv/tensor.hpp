#ifndef REFKV_TENSOR_HPP
#define REFKV_TENSOR_HPP

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "refkv/rng.hpp"

namespace refkv {

// Live-bytes accounting for every tensor buffer; the benchmark reports the
// peak as its memory estimate.
struct AllocStats {
    static int64_t current_bytes();
    static int64_t peak_bytes();
    static void reset_peak();
};

int64_t numel_of(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

struct TensorImpl {
    std::vector<int64_t> shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    // 64-bit value carried alongside 1-element reduction results so finite
    // differences are not limited by f32 rounding of the loss
    double precise_value = 0.0;
    bool has_precise = false;

    explicit TensorImpl(std::vector<int64_t> s);
    ~TensorImpl();
    TensorImpl(const TensorImpl&) = delete;
    TensorImpl& operator=(const TensorImpl&) = delete;

    void ensure_grad();
};

// Dense row-major f32 tensor with value and gradient slots. Copies share the
// underlying buffer; clone() gives an independent one.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, float value);
    static Tensor from(std::vector<int64_t> shape, std::vector<float> values);
    static Tensor scalar(float value);
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stdev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int64_t>& shape() const { return impl_->shape; }
    int rank() const { return int(impl_->shape.size()); }
    int64_t dim(int i) const { return impl_->shape[size_t(i)]; }
    int64_t numel() const { return int64_t(impl_->data.size()); }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float>& vec() { return impl_->data; }
    const std::vector<float>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }
    // gradient buffer, zero-initialized on first touch
    float* grad() { impl_->ensure_grad(); return impl_->grad.data(); }
    const std::vector<float>& grad_vec() const { return impl_->grad; }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad();

    float item() const;
    // the stashed 64-bit reduction value when present, else item()
    double precise_item() const;
    void set_precise(double v) { impl_->precise_value = v; impl_->has_precise = true; }

    Tensor clone() const;     // deep copy, keeps requires_grad
    Tensor detached() const;  // deep copy with requires_grad = false

    bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }
    bool all_finite() const;
    uint64_t checksum() const;  // FNV-1a over the raw value bytes

    TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

[[noreturn]] void tensor_error(const std::string& msg);

}  // namespace refkv

#endif
