#include "refkv/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace refkv {

void orthonormalize_rows(std::vector<double>& a, int64_t rows, int64_t cols) {
    if (rows > cols) throw std::invalid_argument("orthonormalize_rows: rows > cols");
    for (int64_t r = 0; r < rows; ++r) {
        double* row = a.data() + r * cols;
        for (int64_t p = 0; p < r; ++p) {
            const double* prev = a.data() + p * cols;
            double dot = 0.0;
            for (int64_t c = 0; c < cols; ++c) dot += row[c] * prev[c];
            for (int64_t c = 0; c < cols; ++c) row[c] -= dot * prev[c];
        }
        double nrm = 0.0;
        for (int64_t c = 0; c < cols; ++c) nrm += row[c] * row[c];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12)
            throw std::runtime_error("orthonormalize_rows: numerically dependent rows");
        for (int64_t c = 0; c < cols; ++c) row[c] /= nrm;
    }
}

void jacobi_eigen_symmetric(const std::vector<double>& a_in, int64_t n,
                            std::vector<double>& eigvals, std::vector<double>& eigvecs) {
    std::vector<double> a = a_in;
    eigvecs.assign(size_t(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) eigvecs[size_t(i * n + i)] = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += a[size_t(p * n + q)] * a[size_t(p * n + q)];
        if (off < 1e-26) break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = a[size_t(p * n + q)];
                if (std::fabs(apq) < 1e-300) continue;
                double app = a[size_t(p * n + p)], aqq = a[size_t(q * n + q)];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    double akp = a[size_t(k * n + p)], akq = a[size_t(k * n + q)];
                    a[size_t(k * n + p)] = c * akp - s * akq;
                    a[size_t(k * n + q)] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double apk = a[size_t(p * n + k)], aqk = a[size_t(q * n + k)];
                    a[size_t(p * n + k)] = c * apk - s * aqk;
                    a[size_t(q * n + k)] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double vkp = eigvecs[size_t(k * n + p)], vkq = eigvecs[size_t(k * n + q)];
                    eigvecs[size_t(k * n + p)] = c * vkp - s * vkq;
                    eigvecs[size_t(k * n + q)] = s * vkp + c * vkq;
                }
            }
    }
    eigvals.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) eigvals[size_t(i)] = a[size_t(i * n + i)];
}

std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b, int64_t n) {
    if (int64_t(a.size()) != n * n || int64_t(b.size()) != n)
        throw std::invalid_argument("solve_linear: bad sizes");
    for (int64_t col = 0; col < n; ++col) {
        int64_t piv = col;
        for (int64_t r = col + 1; r < n; ++r)
            if (std::fabs(a[size_t(r * n + col)]) > std::fabs(a[size_t(piv * n + col)])) piv = r;
        if (std::fabs(a[size_t(piv * n + col)]) < 1e-12)
            throw std::runtime_error("solve_linear: singular system");
        if (piv != col) {
            for (int64_t c = 0; c < n; ++c) std::swap(a[size_t(col * n + c)], a[size_t(piv * n + c)]);
            std::swap(b[size_t(col)], b[size_t(piv)]);
        }
        double d = a[size_t(col * n + col)];
        for (int64_t r = col + 1; r < n; ++r) {
            double f = a[size_t(r * n + col)] / d;
            if (f == 0.0) continue;
            for (int64_t c = col; c < n; ++c) a[size_t(r * n + c)] -= f * a[size_t(col * n + c)];
            b[size_t(r)] -= f * b[size_t(col)];
        }
    }
    std::vector<double> x(static_cast<size_t>(n), 0.0);
    for (int64_t r = n - 1; r >= 0; --r) {
        double acc = b[size_t(r)];
        for (int64_t c = r + 1; c < n; ++c) acc -= a[size_t(r * n + c)] * x[size_t(c)];
        x[size_t(r)] = acc / a[size_t(r * n + r)];
    }
    return x;
}

std::vector<double> matmul_square(const std::vector<double>& a,
                                  const std::vector<double>& b, int64_t n) {
    std::vector<double> c(size_t(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < n; ++k) {
            double av = a[size_t(i * n + k)];
            if (av == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) c[size_t(i * n + j)] += av * b[size_t(k * n + j)];
        }
    return c;
}

}  // namespace refkv
