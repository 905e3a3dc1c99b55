#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ctrlstruct/corpus.hpp"
#include "ctrlstruct/nn/autograd.hpp"

namespace testing_support {

using ctrlstruct::nn::Matrix;
using ctrlstruct::nn::Parameter;
using ctrlstruct::nn::Vector;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n(rng);
    return m;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Per-coordinate gradient mismatch, with a floor so that entries that are
// zero up to rounding do not dominate.
inline double grad_err(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central difference of `loss` with respect to p.value(r, c).
inline double central_diff(Parameter& p, Eigen::Index r, Eigen::Index c, const std::function<double()>& loss,
                           double h) {
    const double orig = p.value(r, c);
    p.value(r, c) = orig + h;
    const double up = loss();
    p.value(r, c) = orig - h;
    const double down = loss();
    p.value(r, c) = orig;
    return (up - down) / (2.0 * h);
}

// Largest grad_err over every entry of every parameter (entries are visited
// with a stride so large tables stay cheap).
inline double max_param_grad_err(const std::vector<Parameter*>& params, const std::vector<Matrix>& analytic,
                                 const std::function<double()>& loss, double h, int stride = 1,
                                 std::string* worst = nullptr, double floor = 1e-6) {
    double worst_err = 0.0;
    int counter = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
                if (counter++ % stride != 0) continue;
                const double num = central_diff(p, r, c, loss, h);
                const double e = grad_err(analytic[i](r, c), num, floor);
                if (e > worst_err) {
                    worst_err = e;
                    if (worst) {
                        std::ostringstream os;
                        os << p.name << "(" << r << "," << c << ") analytic " << analytic[i](r, c) << " numeric "
                           << num;
                        *worst = os.str();
                    }
                }
            }
        }
    }
    return worst_err;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = std::filesystem::temp_directory_path() /
                ("ctrlstruct_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

// Conversations given as lists of utterance texts; speakers alternate A, B.
inline ctrlstruct::corpus::Corpus make_corpus(const std::vector<std::vector<std::string>>& conversations) {
    ctrlstruct::corpus::Corpus c;
    for (std::size_t i = 0; i < conversations.size(); ++i) {
        ctrlstruct::corpus::Conversation conv;
        conv.id = "c" + std::to_string(i);
        for (std::size_t t = 0; t < conversations[i].size(); ++t) {
            ctrlstruct::corpus::Utterance u;
            u.conv_id = conv.id;
            u.turn_index = static_cast<int>(t);
            u.speaker = t % 2 == 0 ? ctrlstruct::corpus::Speaker::A : ctrlstruct::corpus::Speaker::B;
            u.text = conversations[i][t];
            conv.utterances.push_back(u);
        }
        c.conversations.push_back(conv);
    }
    return c;
}

}  // namespace testing_support
