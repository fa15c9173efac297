#include "refkv/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace refkv {

namespace {
std::atomic<int64_t> g_current_bytes{0};
std::atomic<int64_t> g_peak_bytes{0};

void track_alloc(int64_t bytes) {
    int64_t cur = g_current_bytes.fetch_add(bytes) + bytes;
    int64_t peak = g_peak_bytes.load();
    while (cur > peak && !g_peak_bytes.compare_exchange_weak(peak, cur)) {
    }
}
}  // namespace

int64_t AllocStats::current_bytes() { return g_current_bytes.load(); }
int64_t AllocStats::peak_bytes() { return g_peak_bytes.load(); }
void AllocStats::reset_peak() { g_peak_bytes.store(g_current_bytes.load()); }

int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e < 0) tensor_error("negative extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

TensorImpl::TensorImpl(std::vector<int64_t> s) : shape(std::move(s)) {
    data.resize(size_t(numel_of(shape)), 0.0f);
    track_alloc(int64_t(data.size()) * 4);
}

TensorImpl::~TensorImpl() {
    track_alloc(-int64_t(data.size() + grad.size()) * 4);
}

void TensorImpl::ensure_grad() {
    if (grad.empty() && !data.empty()) {
        grad.resize(data.size(), 0.0f);
        track_alloc(int64_t(grad.size()) * 4);
    }
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>(std::move(shape));
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, float value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.impl_->data) v = value;
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<float> values) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>(std::move(shape));
    if (int64_t(values.size()) != t.numel())
        tensor_error("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(t.shape()));
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stdev) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.impl_->data) v = float(rng.normal() * stdev);
    return t;
}

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad.empty())
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (!impl_ || numel() != 1) tensor_error("item() requires a 1-element tensor");
    return impl_->data[0];
}

double Tensor::precise_item() const {
    if (!impl_ || numel() != 1) tensor_error("precise_item() requires a 1-element tensor");
    return impl_->has_precise ? impl_->precise_value : double(impl_->data[0]);
}

Tensor Tensor::clone() const {
    Tensor t = zeros(impl_->shape, impl_->requires_grad);
    t.impl_->data = impl_->data;
    return t;
}

Tensor Tensor::detached() const {
    Tensor t = zeros(impl_->shape, false);
    t.impl_->data = impl_->data;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

uint64_t Tensor::checksum() const {
    uint64_t h = 1469598103934665603ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(impl_->data.data());
    for (size_t i = 0; i < impl_->data.size() * 4; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

void tensor_error(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace refkv
