#include "smpmc/regression.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>

#include "smpmc/errors.hpp"

namespace smpmc {

BasisFamily parse_basis_family(const std::string& name) {
    if (name == "polynomial_total_degree") return BasisFamily::polynomial_total_degree;
    if (name == "tensor_polynomial") return BasisFamily::tensor_polynomial;
    throw InvalidArgument("unknown basis family '" + name + "'");
}

std::string to_string(BasisFamily f) {
    return f == BasisFamily::polynomial_total_degree ? "polynomial_total_degree" : "tensor_polynomial";
}

std::vector<std::vector<int>> RegressionBasis::exponents(std::size_t n) const {
    if (degree < 1) throw InvalidArgument("basis degree must be >= 1");
    std::vector<std::vector<int>> out;
    std::vector<int> e(n, 0);
    std::function<void(std::size_t, int)> rec = [&](std::size_t i, int used) {
        if (i == n) {
            out.push_back(e);
            return;
        }
        const int cap = family == BasisFamily::polynomial_total_degree ? degree - used : degree;
        for (int a = 0; a <= cap; ++a) {
            e[i] = a;
            rec(i + 1, used + a);
        }
        e[i] = 0;
    };
    rec(0, 0);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        int sa = 0, sb = 0;
        for (int v : a) sa += v;
        for (int v : b) sb += v;
        return sa < sb;
    });
    return out;
}

namespace {

void eval_basis(std::span<const double> x, std::size_t n, std::size_t K, const std::vector<double>& mean,
                const std::vector<double>& scale, const std::vector<int>& exps, double* phi) {
    double z[16];
    int maxe = 0;
    for (int e : exps) maxe = std::max(maxe, e);
    // powers table: pw[i][a] = z_i^a
    double pw[16][12];
    for (std::size_t i = 0; i < n; ++i) {
        z[i] = (x[i] - mean[i]) / scale[i];
        pw[i][0] = 1.0;
        for (int a = 1; a <= maxe; ++a) pw[i][a] = pw[i][a - 1] * z[i];
    }
    for (std::size_t k = 0; k < K; ++k) {
        double v = 1.0;
        for (std::size_t i = 0; i < n; ++i) v *= pw[i][exps[k * n + i]];
        phi[k] = v;
    }
}

}  // namespace

void RegressionFit::basis(std::span<const double> x, std::span<double> phi) const {
    eval_basis(x, n, K, mean, scale, exps, phi.data());
}

void RegressionFit::evaluate(std::span<const double> x, std::span<double> out) const {
    if (K == 0) {
        for (std::size_t o = 0; o < outputs; ++o) out[o] = 0.0;
        return;
    }
    double phi[512];
    eval_basis(x, n, K, mean, scale, exps, phi);
    for (std::size_t o = 0; o < outputs; ++o) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += phi[k] * coeffs[k * outputs + o];
        out[o] = s;
    }
}

double RegressionFit::evaluate1(std::span<const double> x, std::size_t output) const {
    if (K == 0) return 0.0;
    double phi[512];
    eval_basis(x, n, K, mean, scale, exps, phi);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += phi[k] * coeffs[k * outputs + output];
    return s;
}

Regressor::Regressor(const RegressionBasis& basis, std::span<const double> states, std::size_t paths,
                     std::size_t n, const Executor& ex)
    : M_(paths), n_(n), ex_(ex) {
    if (n > 16) throw InvalidArgument("regression supports at most 16 state dimensions");
    if (basis.degree > 11) throw InvalidArgument("regression supports degree <= 11");
    const double M = static_cast<double>(M_);
    mean_.assign(n, 0.0);
    scale_.assign(n, 1.0);
    std::vector<bool> active(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t m = 0; m < M_; ++m) s += states[m * n + i];
        const double mu = s / M;
        double ss = 0.0;
        for (std::size_t m = 0; m < M_; ++m) ss += (states[m * n + i] - mu) * (states[m * n + i] - mu);
        const double sd = std::sqrt(ss / M);
        mean_[i] = mu;
        if (sd > 1e-12 * (1.0 + std::abs(mu))) {
            scale_[i] = sd;
            active[i] = true;
        }
    }
    for (const auto& e : basis.exponents(n)) {
        bool ok = true;
        for (std::size_t i = 0; i < n; ++i)
            if (e[i] > 0 && !active[i]) ok = false;
        if (ok) exps_.insert(exps_.end(), e.begin(), e.end());
    }
    K_ = exps_.size() / n;
    if (K_ > 512) throw InvalidArgument("regression basis too large");
    if (M_ < K_) throw SingularDesignMatrix("basis of size " + std::to_string(K_) + " needs at least that many paths");

    phi_.resize(M_ * K_);
    const std::size_t nc = ex_.chunks(M_);
    std::vector<Eigen::MatrixXd> parts(nc);
    ex_.for_chunks(M_, [&](std::size_t c, std::size_t b, std::size_t e) {
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(K_, K_);
        for (std::size_t m = b; m < e; ++m) {
            double* ph = phi_.data() + m * K_;
            eval_basis(states.subspan(m * n, n), n, K_, mean_, scale_, exps_, ph);
            for (std::size_t a = 0; a < K_; ++a)
                for (std::size_t bb = a; bb < K_; ++bb) G(a, bb) += ph[a] * ph[bb];
        }
        parts[c] = std::move(G);
    });
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(K_, K_);
    for (const auto& P : parts) G += P;
    G /= M;
    G.triangularView<Eigen::StrictlyLower>() = G.transpose().triangularView<Eigen::StrictlyLower>();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    const double lmax = es.eigenvalues().maxCoeff(), lmin = es.eigenvalues().minCoeff();
    if (!std::isfinite(lmax) || !(lmin > 1e-13 * lmax))
        throw SingularDesignMatrix("design matrix is numerically singular (basis size " + std::to_string(K_) + ")");
    cond_ = std::sqrt(lmax / lmin);
    const Eigen::MatrixXd inv = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                                es.eigenvectors().transpose();
    gram_inv_.assign(inv.data(), inv.data() + K_ * K_);
}

RegressionFit Regressor::fit(std::span<const double> Y, std::size_t outputs) const {
    const double M = static_cast<double>(M_);
    const std::size_t nc = ex_.chunks(M_);
    std::vector<std::vector<double>> parts(nc);
    ex_.for_chunks(M_, [&](std::size_t c, std::size_t b, std::size_t e) {
        std::vector<double> r(K_ * outputs + 2 * outputs, 0.0);
        for (std::size_t m = b; m < e; ++m) {
            const double* ph = phi_.data() + m * K_;
            for (std::size_t o = 0; o < outputs; ++o) {
                const double y = Y[m * outputs + o];
                for (std::size_t k = 0; k < K_; ++k) r[k * outputs + o] += ph[k] * y;
                r[K_ * outputs + o] += y;
                r[K_ * outputs + outputs + o] += y * y;
            }
        }
        parts[c] = std::move(r);
    });
    std::vector<double> rhs(K_ * outputs + 2 * outputs, 0.0);
    for (const auto& p : parts)
        for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] += p[i];

    RegressionFit f;
    f.n = n_;
    f.K = K_;
    f.outputs = outputs;
    f.mean = mean_;
    f.scale = scale_;
    f.exps = exps_;
    f.condition = cond_;
    f.coeffs.assign(K_ * outputs, 0.0);
    for (std::size_t a = 0; a < K_; ++a)
        for (std::size_t o = 0; o < outputs; ++o) {
            double s = 0.0;
            for (std::size_t b = 0; b < K_; ++b) s += gram_inv_[a + K_ * b] * rhs[b * outputs + o] / M;
            if (!std::isfinite(s)) throw NonFiniteRegression("regression produced a non-finite coefficient");
            f.coeffs[a * outputs + o] = s;
        }
    // R^2 = 1 - SSres/SStot with SSres = sum y^2 - c' Phi'y (normal equations)
    f.r2.assign(outputs, 1.0);
    for (std::size_t o = 0; o < outputs; ++o) {
        const double sy = rhs[K_ * outputs + o], syy = rhs[K_ * outputs + outputs + o];
        double explained = 0.0;
        for (std::size_t k = 0; k < K_; ++k) explained += f.coeffs[k * outputs + o] * rhs[k * outputs + o];
        const double sst = syy - sy * sy / M;
        const double ssr = std::max(0.0, syy - explained);
        if (sst > 1e-300 * (1.0 + syy)) f.r2[o] = std::clamp(1.0 - ssr / sst, -1.0, 1.0);
    }
    return f;
}

void Regressor::fitted(const RegressionFit& f, std::span<double> out) const {
    const std::size_t outputs = f.outputs;
    ex_.for_each(M_, [&](std::size_t b, std::size_t e) {
        for (std::size_t m = b; m < e; ++m) {
            const double* ph = phi_.data() + m * K_;
            for (std::size_t o = 0; o < outputs; ++o) {
                double s = 0.0;
                for (std::size_t k = 0; k < K_; ++k) s += ph[k] * f.coeffs[k * outputs + o];
                out[m * outputs + o] = s;
            }
        }
    });
}

}  // namespace smpmc
