#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qlcb/csv.hpp"
#include "qlcb/errors.hpp"
#include "qlcb/rng.hpp"

namespace qlcb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Transition {
    Vector s;
    Vector a;
    double r = 0.0;
    Vector s_next;
    Vector a_next; // evaluation policy's action at s_next
};

struct DatasetMeta {
    std::string generator;
    std::uint64_t seed = 0;
    std::string config_text;      // serialized generator config
    std::uint64_t config_hash = 0;
};

/// Row-aligned data matrices: row k of `x` holds (s, a) of transition k, row k
/// of `xp` holds (s', pi(s')). Columns are states first, then actions.
struct OfflineDataset {
    Matrix x;
    Vector r;
    Matrix xp;
    int state_dim = 0;
    int action_dim = 0;
    DatasetMeta meta;

    Eigen::Index rows() const { return x.rows(); }

    void validate() const {
        if (x.rows() < 1) throw EmptyDataset("dataset has no rows");
        if (x.rows() != r.size() || x.rows() != xp.rows())
            throw DimensionMismatch("x, r, xp row counts differ");
        if (x.cols() != xp.cols()) throw DimensionMismatch("x and xp column counts differ");
        if (x.cols() != state_dim + action_dim)
            throw DimensionMismatch("column count does not match state_dim + action_dim");
    }
};

struct GaussianMdpConfig {
    int state_dim = 30;
    int action_dim = 30;
    int n_episodes = 5;
    int episode_len = 5;
    std::uint64_t seed = 0;

    void validate() const {
        if (state_dim < 1 || action_dim < 1 || n_episodes < 1 || episode_len < 1)
            throw ConfigError("gaussian mdp config requires all dimensions >= 1");
    }

    std::string describe() const {
        return "state_dim=" + std::to_string(state_dim) + " action_dim=" + std::to_string(action_dim) +
               " n_episodes=" + std::to_string(n_episodes) + " episode_len=" + std::to_string(episode_len) +
               " seed=" + std::to_string(seed);
    }
};

/// Continuous chain MDP: S = [state_lo, state_hi], s' = clamp(s + a), reward
/// indicator on s' in [reward_lo, reward_hi]. Data collection drops every
/// transition whose s or s' falls inside [gap_lo, gap_hi].
struct ChainConfig {
    double reward_lo = 0.75;
    double reward_hi = 1.0;
    double state_lo = -1.0;
    double state_hi = 1.0;
    double action_range = 0.3;
    int n_episodes = 40;
    int episode_len = 30;
    double gap_lo = -0.33;
    double gap_hi = 0.33;
    double eval_action = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(state_lo < gap_lo && gap_lo < gap_hi && gap_hi < state_hi))
            throw ConfigError("chain config requires state_lo < gap_lo < gap_hi < state_hi");
        if (!(state_lo <= reward_lo && reward_lo <= reward_hi && reward_hi <= state_hi))
            throw ConfigError("chain reward interval must lie inside the state interval");
        if (n_episodes < 1 || episode_len < 1) throw ConfigError("chain episode counts must be >= 1");
        if (action_range <= 0.0) throw ConfigError("chain action_range must be positive");
    }

    std::string describe() const {
        return "reward=[" + format_double(reward_lo) + "," + format_double(reward_hi) + "]" +
               " state=[" + format_double(state_lo) + "," + format_double(state_hi) + "]" +
               " gap=[" + format_double(gap_lo) + "," + format_double(gap_hi) + "]" +
               " action_range=" + format_double(action_range) + " eval_action=" + format_double(eval_action) +
               " n_episodes=" + std::to_string(n_episodes) + " episode_len=" + std::to_string(episode_len) +
               " seed=" + std::to_string(seed);
    }
};

struct ChainStep {
    double s_next = 0.0;
    double r = 0.0;
};

inline ChainStep chain_step(double s, double a, const ChainConfig& cfg) {
    ChainStep out;
    out.s_next = std::clamp(s + a, cfg.state_lo, cfg.state_hi);
    out.r = (out.s_next >= cfg.reward_lo && out.s_next <= cfg.reward_hi) ? 1.0 : 0.0;
    return out;
}

/// Uniform-random episodes on the chain MDP, gap transitions removed, with the
/// constant evaluation action recorded as pi(s'). Episode e draws from
/// substream(seed, e).
inline OfflineDataset collect_chain_dataset(const ChainConfig& cfg) {
    cfg.validate();
    std::vector<double> s_col, a_col, r_col, sp_col;
    const auto in_gap = [&](double s) { return s >= cfg.gap_lo && s <= cfg.gap_hi; };
    for (int ep = 0; ep < cfg.n_episodes; ++ep) {
        Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(ep));
        double s = rng.uniform(cfg.state_lo, cfg.state_hi);
        for (int step = 0; step < cfg.episode_len; ++step) {
            const double a = rng.uniform(-cfg.action_range, cfg.action_range);
            const ChainStep next = chain_step(s, a, cfg);
            if (!in_gap(s) && !in_gap(next.s_next)) {
                s_col.push_back(s);
                a_col.push_back(a);
                r_col.push_back(next.r);
                sp_col.push_back(next.s_next);
            }
            s = next.s_next;
        }
    }
    if (s_col.empty()) throw EmptyDataset("gap filtering removed every chain transition");

    OfflineDataset ds;
    const Eigen::Index n = static_cast<Eigen::Index>(s_col.size());
    ds.x.resize(n, 2);
    ds.r.resize(n);
    ds.xp.resize(n, 2);
    for (Eigen::Index k = 0; k < n; ++k) {
        ds.x(k, 0) = s_col[k];
        ds.x(k, 1) = a_col[k];
        ds.r(k) = r_col[k];
        ds.xp(k, 0) = sp_col[k];
        ds.xp(k, 1) = cfg.eval_action;
    }
    ds.state_dim = 1;
    ds.action_dim = 1;
    ds.meta.generator = "chain";
    ds.meta.seed = cfg.seed;
    ds.meta.config_text = cfg.describe();
    ds.meta.config_hash = fnv1a_string(ds.meta.config_text);
    return ds;
}

/// Random Gaussian MDP data: every state, action, next state and reward is a
/// fresh standard normal draw; the evaluated policy replays the behavior
/// action at s'. Episode e draws from substream(seed, e).
inline OfflineDataset generate_gaussian_dataset(const GaussianMdpConfig& cfg) {
    cfg.validate();
    const Eigen::Index n = static_cast<Eigen::Index>(cfg.n_episodes) * cfg.episode_len;
    const int dim = cfg.state_dim + cfg.action_dim;

    OfflineDataset ds;
    ds.x.resize(n, dim);
    ds.r.resize(n);
    ds.xp.resize(n, dim);
    Eigen::Index row = 0;
    for (int ep = 0; ep < cfg.n_episodes; ++ep) {
        Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(ep));
        Vector s(cfg.state_dim);
        for (int i = 0; i < cfg.state_dim; ++i) s(i) = rng.normal();
        for (int step = 0; step < cfg.episode_len; ++step) {
            Vector a(cfg.action_dim), sp(cfg.state_dim);
            for (int i = 0; i < cfg.action_dim; ++i) a(i) = rng.normal();
            for (int i = 0; i < cfg.state_dim; ++i) sp(i) = rng.normal();
            const double r = rng.normal();
            ds.x.row(row).head(cfg.state_dim) = s;
            ds.x.row(row).tail(cfg.action_dim) = a;
            ds.r(row) = r;
            ds.xp.row(row).head(cfg.state_dim) = sp;
            ds.xp.row(row).tail(cfg.action_dim) = a;
            s = sp;
            ++row;
        }
    }
    ds.state_dim = cfg.state_dim;
    ds.action_dim = cfg.action_dim;
    ds.meta.generator = "gaussian";
    ds.meta.seed = cfg.seed;
    ds.meta.config_text = cfg.describe();
    ds.meta.config_hash = fnv1a_string(ds.meta.config_text);
    return ds;
}

/// Evenly spaced (state, eval_action) rows over the chain state interval,
/// endpoints inclusive.
inline Matrix uncertainty_grid(const ChainConfig& cfg, int n_points) {
    if (n_points < 2) throw ConfigError("uncertainty grid needs at least 2 points");
    Matrix grid(n_points, 2);
    const double step = (cfg.state_hi - cfg.state_lo) / (n_points - 1);
    for (int k = 0; k < n_points; ++k) {
        grid(k, 0) = cfg.state_lo + step * k;
        grid(k, 1) = cfg.eval_action;
    }
    grid(n_points - 1, 0) = cfg.state_hi;
    return grid;
}

inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m,
                             const std::string& col_prefix) {
    CsvWriter csv(path);
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) names.push_back(col_prefix + std::to_string(j));
    csv.header(names);
    std::vector<std::string> cells(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) cells[static_cast<std::size_t>(j)] = format_double(m(i, j));
        csv.row(cells);
    }
}

/// Serializes the dataset as x.csv / r.csv / xp.csv plus a meta.json sidecar
/// under `dir`. Column order is states then actions.
inline void write_dataset(const OfflineDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_matrix_csv(dir / "x.csv", ds.x, "c");
    write_matrix_csv(dir / "xp.csv", ds.xp, "c");
    {
        CsvWriter csv(dir / "r.csv");
        csv.header({"r"});
        for (Eigen::Index i = 0; i < ds.r.size(); ++i) csv.row({format_double(ds.r(i))});
    }
    std::ofstream meta(dir / "meta.json", std::ios::binary);
    meta << "{\n"
         << "  \"generator\": \"" << ds.meta.generator << "\",\n"
         << "  \"seed\": " << ds.meta.seed << ",\n"
         << "  \"state_dim\": " << ds.state_dim << ",\n"
         << "  \"action_dim\": " << ds.action_dim << ",\n"
         << "  \"rows\": " << ds.rows() << ",\n"
         << "  \"config\": \"" << ds.meta.config_text << "\",\n"
         << "  \"config_hash\": " << ds.meta.config_hash << "\n"
         << "}\n";
}

inline Matrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty csv " + path.string());
    const std::size_t cols = split_csv_line(line).size();
    std::vector<double> values;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != cols) throw std::runtime_error("ragged csv row in " + path.string());
        for (const auto& c : cells) values.push_back(parse_double(c));
        ++rows;
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * cols + j];
    return m;
}

} // namespace qlcb
