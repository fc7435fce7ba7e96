#include <cmath>
#include <set>

#include "smpmc/errors.hpp"
#include "smpmc/models.hpp"

namespace smpmc {

namespace {

using In = ControlModel::In;
using Out = ControlModel::Out;

struct ParamReader {
    std::string model;
    const Params& given;
    std::set<std::string> known;

    double get(const std::string& key, double fallback) {
        known.insert(key);
        auto it = given.find(key);
        return it == given.end() ? fallback : it->second;
    }
    void finish() const {
        for (const auto& [k, v] : given)
            if (!known.count(k)) throw InvalidParams(model + ": unknown parameter '" + k + "'");
    }
};

ControlSet read_grid(ParamReader& pr, double lo, double hi, double pts) {
    const double a = pr.get("u_min", lo), b = pr.get("u_max", hi), k = pr.get("u_points", pts);
    if (!(k >= 1.0) || k != std::floor(k)) throw InvalidParams(pr.model + ": u_points must be a positive integer");
    if (!(b >= a)) throw InvalidParams(pr.model + ": u_max < u_min");
    return ControlSet::interval(a, b, static_cast<std::size_t>(k));
}

void zero(Out out) {
    for (double& v : out) v = 0.0;
}

ControlModel polynomial_x5(const Params& params) {
    ParamReader pr{"polynomial_x5", params, {}};
    const double kb = pr.get("drift_control", 0.0);
    const double ks = pr.get("diffusion_control", 0.0);
    const double lam = pr.get("control_cost", 1.0);
    ControlModel m;
    m.control_set = read_grid(pr, -1.0, 1.0, 21);
    pr.finish();
    m.name = "polynomial_x5";
    m.params = params;
    m.growth_m = 2;
    m.growth_l = 2;
    m.drift = [kb](In x, double u, Out o) {
        const double x2 = x[0] * x[0];
        o[0] = x[0] - x2 * x2 * x[0] + kb * u;
    };
    m.diffusion = [ks](In x, double u, Out o) { o[0] = x[0] * x[0] + ks * u; };
    m.cost = [lam](In x, double u) { return x[0] * x[0] + lam * u * u; };
    m.drift_jac = [](In x, double, Out o) {
        const double x2 = x[0] * x[0];
        o[0] = 1.0 - 5.0 * x2 * x2;
    };
    m.diffusion_jac = [](In x, double, Out o) { o[0] = 2.0 * x[0]; };
    m.cost_grad = [](In x, double, Out o) { o[0] = 2.0 * x[0]; };
    m.drift_hess = [](In x, double, Out o) { o[0] = -20.0 * x[0] * x[0] * x[0]; };
    m.diffusion_hess = [](In, double, Out o) { o[0] = 2.0; };
    m.cost_hess = [](In, double, Out o) { o[0] = 2.0; };
    return m;
}

ControlModel logistic(const Params& params) {
    ParamReader pr{"logistic", params, {}};
    const double al = pr.get("alpha", 1.0), be = pr.get("beta", 1.0);
    const double s0 = pr.get("sigma0", 0.2), s1 = pr.get("sigma1", 0.0);
    const double kb = pr.get("drift_control", 1.0);
    const double tgt = pr.get("target", 0.5), lam = pr.get("control_cost", 1.0);
    ControlModel m;
    m.control_set = read_grid(pr, -0.5, 0.5, 21);
    pr.finish();
    if (!(al > 0.0)) throw InvalidParams("logistic: alpha must be > 0");
    if (!(be > 0.0)) throw InvalidParams("logistic: beta must be > 0");
    m.name = "logistic";
    m.params = params;
    m.growth_m = 1;
    m.growth_l = 2;
    m.drift = [=](In x, double u, Out o) { o[0] = al * x[0] * (1.0 - be * x[0]) + kb * u; };
    m.diffusion = [=](In x, double u, Out o) { o[0] = (s0 + s1 * u) * x[0]; };
    m.cost = [=](In x, double u) { return (x[0] - tgt) * (x[0] - tgt) + lam * u * u; };
    m.drift_jac = [=](In x, double, Out o) { o[0] = al * (1.0 - 2.0 * be * x[0]); };
    m.diffusion_jac = [=](In, double u, Out o) { o[0] = s0 + s1 * u; };
    m.cost_grad = [=](In x, double, Out o) { o[0] = 2.0 * (x[0] - tgt); };
    m.drift_hess = [=](In, double, Out o) { o[0] = -2.0 * al * be; };
    m.diffusion_hess = [](In, double, Out o) { o[0] = 0.0; };
    m.cost_hess = [](In, double, Out o) { o[0] = 2.0; };
    return m;
}

ControlModel gompertz(const Params& params) {
    ParamReader pr{"gompertz_uncontrolled_noise", params, {}};
    const double al = pr.get("alpha", 1.0), be = pr.get("beta", 1.0);
    const double s0 = pr.get("sigma0", 0.2);
    const double kb = pr.get("drift_control", 1.0);
    const double tgt = pr.get("target", 1.0), lam = pr.get("control_cost", 1.0);
    ControlModel m;
    m.control_set = read_grid(pr, -0.5, 0.5, 21);
    pr.finish();
    if (!(al > 0.0)) throw InvalidParams("gompertz_uncontrolled_noise: alpha must be > 0");
    if (!(be > 0.0)) throw InvalidParams("gompertz_uncontrolled_noise: beta must be > 0");
    m.name = "gompertz_uncontrolled_noise";
    m.params = params;
    m.growth_m = 1;
    m.growth_l = 2;
    m.drift = [=](In x, double u, Out o) { o[0] = al * x[0] * (1.0 - be * std::log(x[0])) + kb * u; };
    m.diffusion = [=](In x, double, Out o) { o[0] = s0 * x[0]; };
    m.cost = [=](In x, double u) { return (x[0] - tgt) * (x[0] - tgt) + lam * u * u; };
    m.drift_jac = [=](In x, double, Out o) { o[0] = al * (1.0 - be - be * std::log(x[0])); };
    m.diffusion_jac = [=](In, double, Out o) { o[0] = s0; };
    m.cost_grad = [=](In x, double, Out o) { o[0] = 2.0 * (x[0] - tgt); };
    m.drift_hess = [=](In x, double, Out o) { o[0] = -al * be / x[0]; };
    m.diffusion_hess = [](In, double, Out o) { o[0] = 0.0; };
    m.cost_hess = [](In, double, Out o) { o[0] = 2.0; };
    return m;
}

ControlModel double_well(const Params& params) {
    ParamReader pr{"double_well", params, {}};
    const double s0 = pr.get("sigma0", 0.3);
    const double kb = pr.get("drift_control", 1.0);
    const double tgt = pr.get("target", 1.0), lam = pr.get("control_cost", 1.0);
    ControlModel m;
    m.control_set = read_grid(pr, -1.0, 1.0, 21);
    pr.finish();
    m.name = "double_well";
    m.params = params;
    m.growth_m = 1;
    m.growth_l = 2;
    // b = -d/dx (x^2 - 1)^2
    m.drift = [=](In x, double u, Out o) { o[0] = -4.0 * x[0] * (x[0] * x[0] - 1.0) + kb * u; };
    m.diffusion = [=](In, double, Out o) { o[0] = s0; };
    m.cost = [=](In x, double u) { return (x[0] - tgt) * (x[0] - tgt) + lam * u * u; };
    m.drift_jac = [](In x, double, Out o) { o[0] = 4.0 - 12.0 * x[0] * x[0]; };
    m.diffusion_jac = [](In, double, Out o) { o[0] = 0.0; };
    m.cost_grad = [=](In x, double, Out o) { o[0] = 2.0 * (x[0] - tgt); };
    m.drift_hess = [](In x, double, Out o) { o[0] = -24.0 * x[0]; };
    m.diffusion_hess = [](In, double, Out o) { o[0] = 0.0; };
    m.cost_hess = [](In, double, Out o) { o[0] = 2.0; };
    return m;
}

// energy x^2/2 + y^2 / (2(1+x^2)); drift is minus its gradient, control pushes x
ControlModel gradient_flow_2d(const Params& params) {
    ParamReader pr{"gradient_flow_2d", params, {}};
    const double s0 = pr.get("sigma0", 0.3);
    const double kb = pr.get("drift_control", 1.0);
    const double lam = pr.get("control_cost", 1.0);
    ControlModel m;
    m.control_set = read_grid(pr, -1.0, 1.0, 21);
    pr.finish();
    m.name = "gradient_flow_2d";
    m.params = params;
    m.state_dim = 2;
    m.noise_dim = 2;
    m.growth_m = 1;
    m.growth_l = 2;
    m.drift = [=](In x, double u, Out o) {
        const double s = 1.0 + x[0] * x[0];
        o[0] = -x[0] + x[0] * x[1] * x[1] / (s * s) + kb * u;
        o[1] = -x[1] / s;
    };
    m.diffusion = [=](In, double, Out o) {
        o[0] = s0;
        o[1] = 0.0;
        o[2] = 0.0;
        o[3] = s0;
    };
    m.cost = [=](In x, double u) { return x[0] * x[0] + x[1] * x[1] + lam * u * u; };
    m.drift_jac = [](In x, double, Out o) {
        const double a = x[0], b = x[1], s = 1.0 + a * a;
        o[0] = -1.0 + b * b * (1.0 - 3.0 * a * a) / (s * s * s);  // d b1/dx
        o[1] = 2.0 * a * b / (s * s);                              // d b2/dx
        o[2] = 2.0 * a * b / (s * s);                              // d b1/dy
        o[3] = -1.0 / s;                                           // d b2/dy
    };
    m.diffusion_jac = [](In, double, Out o) { zero(o); };
    m.cost_grad = [](In x, double, Out o) {
        o[0] = 2.0 * x[0];
        o[1] = 2.0 * x[1];
    };
    m.drift_hess = [](In x, double, Out o) {
        const double a = x[0], b = x[1], s = 1.0 + a * a;
        const double s2 = s * s, s3 = s2 * s, s4 = s3 * s;
        // b1
        o[0] = -12.0 * a * b * b * (1.0 - a * a) / s4;
        o[1] = 2.0 * b * (1.0 - 3.0 * a * a) / s3;
        o[2] = o[1];
        o[3] = 2.0 * a / s2;
        // b2
        o[4] = 2.0 * b * (1.0 - 3.0 * a * a) / s3;
        o[5] = 2.0 * a / s2;
        o[6] = o[5];
        o[7] = 0.0;
    };
    m.diffusion_hess = [](In, double, Out o) { zero(o); };
    m.cost_hess = [](In, double, Out o) {
        o[0] = 2.0;
        o[1] = 0.0;
        o[2] = 0.0;
        o[3] = 2.0;
    };
    return m;
}

ControlModel lq_scalar(const Params& params) {
    ParamReader pr{"lq_scalar", params, {}};
    const double a = pr.get("a", -1.0);
    const double s0 = pr.get("sigma0", 0.5), s1 = pr.get("sigma1", 0.0);
    ControlModel m;
    m.control_set = read_grid(pr, -2.0, 2.0, 41);
    pr.finish();
    m.name = "lq_scalar";
    m.params = params;
    m.growth_m = 0;
    m.growth_l = 2;
    m.drift = [=](In x, double u, Out o) { o[0] = a * x[0] + u; };
    m.diffusion = [=](In, double u, Out o) { o[0] = s0 + s1 * u; };
    m.cost = [](In x, double u) { return x[0] * x[0] + u * u; };
    m.drift_jac = [=](In, double, Out o) { o[0] = a; };
    m.diffusion_jac = [](In, double, Out o) { o[0] = 0.0; };
    m.cost_grad = [](In x, double, Out o) { o[0] = 2.0 * x[0]; };
    m.drift_hess = [](In, double, Out o) { o[0] = 0.0; };
    m.diffusion_hess = [](In, double, Out o) { o[0] = 0.0; };
    m.cost_hess = [](In, double, Out o) { o[0] = 2.0; };
    return m;
}

}  // namespace

std::vector<std::string> builtin_model_names() {
    return {"polynomial_x5", "logistic", "gompertz_uncontrolled_noise", "double_well", "gradient_flow_2d",
            "lq_scalar"};
}

ControlModel builtin_model(const std::string& name, const Params& params) {
    ControlModel m;
    if (name == "polynomial_x5") m = polynomial_x5(params);
    else if (name == "logistic") m = logistic(params);
    else if (name == "gompertz_uncontrolled_noise") m = gompertz(params);
    else if (name == "double_well") m = double_well(params);
    else if (name == "gradient_flow_2d") m = gradient_flow_2d(params);
    else if (name == "lq_scalar") m = lq_scalar(params);
    else throw UnknownModel("no builtin model named '" + name + "'");
    m.validate();
    return m;
}

}  // namespace smpmc
