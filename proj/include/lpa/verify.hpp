#pragma once

// Self-checks runnable from the command line. Each check yields one result
// with the measured value and the bound it was held to.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpa/config.hpp"
#include "lpa/model.hpp"

namespace lpa {

enum class Suite { grad, jacobian, equivalence, accounting, all };
std::string to_string(Suite s);
Suite parse_suite(const std::string& s);

struct CheckResult {
    std::string suite;
    std::string name;
    bool passed = false;
    double value = 0.0;
    double bound = 0.0;
    std::string detail;
};

struct VerifyOptions {
    double grad_tol = 1e-4;
    double grad_step = 1e-5;
    double equivalence_tol = 1e-6;
    /// Overrides every published-total tolerance (absolute parameters).
    std::optional<double> accounting_tol;
    std::uint64_t seed = 1;
};

/// Small f64 model used by the gradient checks: d=8, 2 heads, ffn 16,
/// 2 layers, max length 4, vocab 11. `setting1` selects layer norm, the
/// setting1 order, relu2 and learned positions; otherwise rms norm, setting2,
/// swiglu3 and rotary positions.
ModelConfig grad_check_config(bool setting1, PlacementMode mode);

/// Smallest |pre-activation| of any relu in the model on `batch`; infinity
/// when the model has no relu.
double relu_margin(const Model& model, const TokenBatch& batch);

/// Evaluation point for one gradient check: the model built from `seed` with
/// token and position embeddings redrawn at std 0.5, and a 2×4 token batch
/// chosen so that every relu pre-activation is at least `min_relu_margin` from
/// zero (finite differences straddling a kink are meaningless).
struct GradCheckCase {
    Model model;
    TokenBatch batch;
    double relu_margin = 0.0;
};
GradCheckCase grad_check_case(bool setting1, PlacementMode mode, std::uint64_t seed,
                              double min_relu_margin = 1e-2);

std::vector<CheckResult> grad_suite(const VerifyOptions& options = {});
std::vector<CheckResult> jacobian_suite(const VerifyOptions& options = {});
std::vector<CheckResult> equivalence_suite(const VerifyOptions& options = {});
std::vector<CheckResult> accounting_suite(const VerifyOptions& options = {});
std::vector<CheckResult> run_suite(Suite suite, const VerifyOptions& options = {});

/// One JSON object per check.
std::string render_check_line(const CheckResult& r);

}  // namespace lpa
