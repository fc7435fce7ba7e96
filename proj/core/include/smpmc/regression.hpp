#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "smpmc/parallel.hpp"

namespace smpmc {

enum class BasisFamily { polynomial_total_degree, tensor_polynomial };

BasisFamily parse_basis_family(const std::string& name);
std::string to_string(BasisFamily f);

struct RegressionBasis {
    BasisFamily family = BasisFamily::polynomial_total_degree;
    int degree = 3;

    // exponent tuples, constant first
    std::vector<std::vector<int>> exponents(std::size_t n) const;
};

// Least-squares map basis(standardized x) -> outputs at one node.
struct RegressionFit {
    std::size_t n = 0, K = 0, outputs = 0;
    std::vector<double> mean, scale;
    std::vector<int> exps;        // K * n
    std::vector<double> coeffs;   // K * outputs
    std::vector<double> r2;       // per output
    double condition = 1.0;

    bool empty() const { return K == 0; }
    void basis(std::span<const double> x, std::span<double> phi) const;
    void evaluate(std::span<const double> x, std::span<double> out) const;
    double evaluate1(std::span<const double> x, std::size_t output = 0) const;
};

// Design matrix for one node. Coordinates with no spread across paths are
// dropped from the basis (at t = 0 every path sits at x0).
class Regressor {
public:
    Regressor(const RegressionBasis& basis, std::span<const double> states, std::size_t paths, std::size_t n,
              const Executor& ex);

    std::size_t size() const { return K_; }
    double condition() const { return cond_; }
    std::span<const double> phi(std::size_t m) const { return {phi_.data() + m * K_, K_}; }

    // Y[m*outputs + o]
    RegressionFit fit(std::span<const double> Y, std::size_t outputs) const;
    // out[m*outputs + o]
    void fitted(const RegressionFit& f, std::span<double> out) const;

private:
    std::size_t M_, n_, K_;
    Executor ex_;
    std::vector<double> mean_, scale_;
    std::vector<int> exps_;
    std::vector<double> phi_;
    std::vector<double> gram_inv_;  // K x K
    double cond_ = 1.0;
};

}  // namespace smpmc
