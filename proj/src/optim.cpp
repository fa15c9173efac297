#include "refkv/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace refkv {

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params_) {
        m_.emplace_back(size_t(p.numel()), 0.0f);
        v_.emplace_back(size_t(p.numel()), 0.0f);
    }
}

void Adam::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.requires_grad()) continue;
        float* w = p.data();
        const float* g = p.grad();
        float* m = m_[i].data();
        float* v = v_[i].data();
        for (int64_t j = 0; j < p.numel(); ++j) {
            double gj = g[j];
            double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
            double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
            m[j] = float(mj);
            v[j] = float(vj);
            w[j] -= float(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
        }
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

std::vector<float> Adam::state_blob() const {
    std::vector<float> blob;
    blob.push_back(float(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        blob.insert(blob.end(), m_[i].begin(), m_[i].end());
        blob.insert(blob.end(), v_[i].begin(), v_[i].end());
    }
    return blob;
}

void Adam::load_state_blob(const std::vector<float>& blob) {
    size_t want = 1;
    for (const auto& m : m_) want += 2 * m.size();
    if (blob.size() != want)
        throw std::runtime_error("Adam::load_state_blob: state size mismatch");
    t_ = int64_t(blob[0]);
    size_t off = 1;
    for (size_t i = 0; i < params_.size(); ++i) {
        std::copy(blob.begin() + off, blob.begin() + off + m_[i].size(), m_[i].begin());
        off += m_[i].size();
        std::copy(blob.begin() + off, blob.begin() + off + v_[i].size(), v_[i].begin());
        off += v_[i].size();
    }
}

}  // namespace refkv
