#include "support.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <random>
#include <unistd.h>

namespace lpa::testkit {

std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
    static const std::vector<std::string> kWords = {
        "the",    "a",       "river",  "stone",   "light",   "city",    "old",    "quiet",
        "north",  "market",  "people", "walked",  "across",  "bridge",  "under",  "morning",
        "rain",   "and",     "of",     "in",      "to",      "was",     "were",   "they",
        "she",    "he",      "found",  "small",   "house",   "near",    "water",  "road",
        "long",   "winter",  "summer", "trees",   "built",   "over",    "many",   "years",
        "ships",  "harbor",  "south",  "great",   "hall",    "where",   "music",  "played",
        "children", "school", "garden", "open",   "door",    "window",  "bread",  "salt",
        "history", "record", "first",  "second",  "century", "king",    "village", "field",
        "wind",   "from",    "with",   "into",    "after",   "before",  "during", "their",
        "library", "book",   "wrote",  "letters", "friend",  "travel",  "station", "train",
    };
    std::mt19937_64 rng(seed);
    const std::size_t W = kWords.size();
    // Each word prefers a small set of successors, giving learnable structure.
    std::vector<std::vector<std::size_t>> next(W);
    for (std::size_t w = 0; w < W; ++w) {
        for (int j = 0; j < 4; ++j) {
            next[w].push_back(rng() % W);
        }
    }
    std::string out;
    out.reserve(bytes + 64);
    std::size_t word = rng() % W;
    std::size_t in_sentence = 0;
    std::size_t sentences = 0;
    while (out.size() < bytes) {
        std::string token = kWords[word];
        if (in_sentence == 0) {
            token[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(token[0])));
        }
        out += token;
        ++in_sentence;
        const bool end = in_sentence >= 6 && rng() % 5 == 0;
        if (end || in_sentence >= 16) {
            out += rng() % 7 == 0 ? "?" : ".";
            in_sentence = 0;
            ++sentences;
            out += sentences % 6 == 0 ? "\n\n" : " ";
            word = rng() % W;
        } else {
            out += rng() % 11 == 0 ? ", " : " ";
            word = rng() % 4 == 0 ? rng() % W : next[word][rng() % 4];
        }
    }
    out.resize(bytes);
    return out;
}

std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir, std::size_t bytes,
                                             std::uint64_t seed, const std::string& name) {
    std::filesystem::create_directories(dir);
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const std::string text = synthetic_text(bytes, seed);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    return path;
}

std::filesystem::path fresh_temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("lpa-" + tag + "-" + std::to_string(::getpid()) + "-" +
                      std::to_string(counter++));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

CaptureWarnings::CaptureWarnings() : messages_(std::make_shared<std::vector<std::string>>()) {
    auto sink = messages_;
    previous_ = set_warning_handler([sink](const std::string& m) { sink->push_back(m); });
}

CaptureWarnings::~CaptureWarnings() { set_warning_handler(previous_); }

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    return c;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        return INFINITY;
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    return max_abs_diff(a.to_vector(), b.to_vector());
}

Tensor random_tensor(const Shape& shape, std::uint64_t seed, DType dtype, bool requires_grad) {
    Rng rng(seed);
    return random_normal(shape, 1.0, dtype, rng, requires_grad);
}

TokenBatch random_batch(std::size_t batch, std::size_t seq_len, std::size_t vocab,
                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TokenBatch b{batch, seq_len, {}};
    for (std::size_t i = 0; i < batch * (seq_len + 1); ++i) {
        b.tokens.push_back(static_cast<TokenId>(rng() % vocab));
    }
    return b;
}

std::vector<double> effective_weight(const LinearMap& map) {
    if (const auto* d = std::get_if<DenseLinear>(&map)) {
        return d->weight().to_vector();
    }
    const auto& f = std::get<FactoredLinear>(map);
    return naive_matmul(f.a().to_vector(), f.b().to_vector(), f.d_in(), f.rank(), f.d_out());
}

}  // namespace lpa::testkit
