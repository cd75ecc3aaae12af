#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lpa/diagnostics.hpp"
#include "lpa/model.hpp"
#include "lpa/tensor.hpp"

namespace lpa::testkit {

/// Deterministic English-like text: sentences drawn from a fixed word list with
/// a first-order word chain, punctuation and paragraph breaks.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed = 7);

/// Writes synthetic_text(bytes, seed) to <dir>/<name> and returns the path.
std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir, std::size_t bytes,
                                             std::uint64_t seed = 7,
                                             const std::string& name = "corpus.txt");

/// Empty directory under the system temp dir, unique per call.
std::filesystem::path fresh_temp_dir(const std::string& tag);

/// Captures warnings for its lifetime instead of printing them.
class CaptureWarnings {
public:
    CaptureWarnings();
    ~CaptureWarnings();
    CaptureWarnings(const CaptureWarnings&) = delete;
    CaptureWarnings& operator=(const CaptureWarnings&) = delete;
    const std::vector<std::string>& messages() const { return *messages_; }

private:
    WarningHandler previous_;
    std::shared_ptr<std::vector<std::string>> messages_;
};

/// Row-major triple-loop product.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n);

double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b);

Tensor random_tensor(const Shape& shape, std::uint64_t seed, DType dtype = DType::f64,
                     bool requires_grad = true);

TokenBatch random_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab,
                        std::uint64_t seed);

/// Dense copy of a linear map's effective weight [d_in×d_out].
std::vector<double> effective_weight(const LinearMap& map);

}  // namespace lpa::testkit
