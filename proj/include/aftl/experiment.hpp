#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "aftl/datasets.hpp"
#include "aftl/errors.hpp"
#include "aftl/federation.hpp"

namespace aftl {

struct ExperimentConfig {
    std::string data_dir;  // empty: fall back to $AFTL_DATA_DIR
    std::size_t clients = 10;
    std::size_t samples_per_client = 1500;
    std::size_t target_train = 1000;
    std::size_t target_test = 1000;
    std::size_t classes = 10;
    std::size_t rounds = 100;
    std::size_t init_epochs = 50;
    std::size_t batch_size = 100;
    double eta = 0.01;
    bool discriminator = true;
    bool consistency = true;
    double shift_degrees = 0.0;
    double shift_scale = 1.0;
    double shift_noise = 0.0;
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    std::string architecture = "conv";  // conv | dense
    std::size_t representative = 1;
    bool label_skew = false;
    bool record_transcript = false;
    // ablation only
    std::size_t ablation_seeds = 3;
    std::size_t jobs = 1;

    void validate() const {
        if (clients == 0) throw ConfigError("clients must be positive");
        if (samples_per_client == 0) throw ConfigError("samples_per_client must be positive");
        if (target_train == 0) throw ConfigError("target_train must be positive");
        if (target_test == 0) throw ConfigError("target_test must be positive");
        if (classes == 0 || classes > kMnistClasses) throw ConfigError("classes must lie in [1, 10]");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be positive");
        if (architecture != "conv" && architecture != "dense")
            throw ConfigError("architecture must be conv or dense, got " + architecture);
        if (representative == 0 || representative > clients)
            throw ConfigError("representative must lie in [1, clients]");
        if (ablation_seeds == 0) throw ConfigError("ablation_seeds must be positive");
        if (jobs == 0) throw ConfigError("jobs must be positive");
        shift().validate();
    }

    DomainShiftSpec shift() const { return {shift_degrees, shift_scale, shift_noise, derive_seed(seed, 0x5f)}; }
    bool shifted() const { return shift_degrees != 0.0 || shift_scale != 1.0 || shift_noise != 0.0; }

    PartitionPlan plan() const {
        return {std::vector<std::size_t>(clients, samples_per_client), target_train, target_test, seed, label_skew};
    }

    RoundSchedule schedule() const {
        RoundSchedule s;
        s.rounds = rounds;
        s.init_epochs = init_epochs;
        s.batch_size = batch_size;
        s.eta = eta;
        s.discriminator_enabled = discriminator;
        s.consistency_enabled = consistency;
        return s;
    }

    std::filesystem::path resolved_data_dir() const {
        if (!data_dir.empty()) return data_dir;
        if (const char* env = std::getenv("AFTL_DATA_DIR"); env && *env) return env;
        throw ConfigError("no dataset directory: set data_dir or AFTL_DATA_DIR");
    }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || p != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

}  // namespace detail

/// Applies one key=value setting. Unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    auto size = [&] { return detail::parse_number<std::size_t>(key, value); };
    auto real = [&] { return detail::parse_number<double>(key, value); };
    if (key == "data_dir") c.data_dir = value;
    else if (key == "clients") c.clients = size();
    else if (key == "samples_per_client") c.samples_per_client = size();
    else if (key == "target_train") c.target_train = size();
    else if (key == "target_test") c.target_test = size();
    else if (key == "classes") c.classes = size();
    else if (key == "rounds") c.rounds = size();
    else if (key == "init_epochs") c.init_epochs = size();
    else if (key == "batch_size") c.batch_size = size();
    else if (key == "eta") c.eta = real();
    else if (key == "discriminator") c.discriminator = parse_bool(key, value);
    else if (key == "consistency") c.consistency = parse_bool(key, value);
    else if (key == "shift_degrees") c.shift_degrees = real();
    else if (key == "shift_scale") c.shift_scale = real();
    else if (key == "shift_noise") c.shift_noise = real();
    else if (key == "seed") c.seed = detail::parse_number<std::uint64_t>(key, value);
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "architecture") c.architecture = value;
    else if (key == "representative") c.representative = size();
    else if (key == "label_skew") c.label_skew = parse_bool(key, value);
    else if (key == "record_transcript") c.record_transcript = parse_bool(key, value);
    else if (key == "ablation_seeds") c.ablation_seeds = size();
    else if (key == "jobs") c.jobs = size();
    else throw ConfigError("unknown config key '" + key + "'");
}

/// Flat key=value text; '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
        set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

inline Architecture make_architecture(const ExperimentConfig& c) {
    const Shape sample{1, 28, 28};
    return c.architecture == "dense" ? Architecture::dense(sample, c.classes, c.clients)
                                     : Architecture::conv(sample, c.classes, c.clients);
}

/// Keeps only samples whose label is below `classes`.
inline LabeledSet restrict_classes(const LabeledSet& all, std::size_t classes) {
    if (classes >= kMnistClasses) return all;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < all.size(); ++i)
        if (all.labels[i] < classes) keep.push_back(i);
    return all.subset(keep);
}

/// Partition, optional target shift, and federation construction.
inline Federation build_federation(const ExperimentConfig& c, const LabeledSet& data) {
    c.validate();
    auto part = partition(restrict_classes(data, c.classes), c.plan());
    if (c.shifted()) {
        part.target_train = apply_shift(part.target_train, c.shift());
        part.target_test = apply_shift(part.target_test, c.shift());
    }
    return make_federation(make_architecture(c), c.schedule(), std::move(part), c.seed, c.record_transcript);
}

inline const char* kMetricsHeader = "round,source_loss,domain_loss,consistency_loss,target_accuracy\n";

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_line(const MetricsRow& r) {
    return std::to_string(r.round) + "," + format_double(r.source_loss) + "," + format_double(r.domain_loss) + "," +
           format_double(r.consistency_loss) + "," + format_double(r.target_accuracy) + "\n";
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_atomically(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << contents;
        if (!out.flush()) throw Error("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

struct ExperimentResult {
    std::vector<MetricsRow> rows;
    InitReport init;
    double init_accuracy = 0.0;
    Evaluation final_eval;
};

namespace detail {

inline nlohmann::json config_json(const ExperimentConfig& c) {
    return {{"clients", c.clients},         {"samples_per_client", c.samples_per_client},
            {"target_train", c.target_train}, {"target_test", c.target_test},
            {"classes", c.classes},         {"rounds", c.rounds},
            {"init_epochs", c.init_epochs}, {"batch_size", c.batch_size},
            {"eta", c.eta},                 {"discriminator", c.discriminator},
            {"consistency", c.consistency}, {"shift_degrees", c.shift_degrees},
            {"shift_scale", c.shift_scale}, {"shift_noise", c.shift_noise},
            {"seed", c.seed},               {"architecture", c.architecture},
            {"representative", c.representative}, {"label_skew", c.label_skew}};
}

}  // namespace detail

/// Initialization followed by `rounds` protocol rounds. Writes metrics.csv (one
/// row per round, flushed as it goes), timing.csv, and summary.json. summary.json
/// only appears once every round has finished.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const LabeledSet& data) {
    c.validate();
    const std::filesystem::path out_dir = c.out_dir;
    std::filesystem::create_directories(out_dir);
    std::filesystem::remove(out_dir / "summary.json");

    auto fed = build_federation(c, data);
    ExperimentResult result;
    result.init = run_initialization(fed, static_cast<std::uint32_t>(c.representative));
    result.init_accuracy = evaluate_target(fed).accuracy;

    std::ofstream metrics(out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    std::ofstream timing(out_dir / "timing.csv", std::ios::binary | std::ios::trunc);
    if (!metrics || !timing) throw Error("cannot write metrics under " + out_dir.string());
    metrics << kMetricsHeader << std::flush;
    timing << "round,wall_ms\n";
    for (std::size_t r = 0; r < c.rounds; ++r) {
        auto row = run_round(fed, true);
        metrics << metrics_line(row) << std::flush;
        timing << row.round << "," << format_double(row.wall_ms) << "\n";
        result.rows.push_back(row);
    }
    result.final_eval = evaluate_target(fed);
    if (c.record_transcript) write_transcript(out_dir / "transcript.bin", fed.bus.transcript());

    nlohmann::json summary = {{"config", detail::config_json(c)},
                              {"init_epoch_loss", result.init.epoch_loss},
                              {"init_target_accuracy", result.init_accuracy},
                              {"final_target_accuracy", result.final_eval.accuracy},
                              {"confusion", result.final_eval.confusion},
                              {"rounds_completed", result.rows.size()}};
    write_atomically(out_dir / "summary.json", summary.dump(2) + "\n");
    return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& c) {
    c.validate();
    return run_experiment(c, load_mnist_train(c.resolved_data_dir()));
}

struct AblationTask {
    std::string name;
    bool discriminator = false;
    std::size_t clients = 0;
    std::size_t samples_per_client = 0;
};

/// Tasks A1-A4 (no discriminator) and C1-C4 (with it).
inline std::vector<AblationTask> default_ablation_grid() {
    const std::pair<std::size_t, std::size_t> settings[] = {{5, 200}, {10, 100}, {5, 800}, {10, 400}};
    std::vector<AblationTask> grid;
    for (bool disc : {false, true})
        for (std::size_t i = 0; i < 4; ++i)
            grid.push_back({std::string(disc ? "C" : "A") + std::to_string(i + 1), disc, settings[i].first,
                            settings[i].second});
    return grid;
}

struct AblationCell {
    AblationTask task;
    std::uint64_t seed = 0;
    std::optional<double> accuracy;  // empty when the cell failed
    std::string error;
};

struct AblationResult {
    std::vector<AblationCell> cells;
    std::map<std::string, double> task_median;  // over the seeds that finished
    double spread_without = 0.0;                // max - min of task medians, per arm
    double spread_with = 0.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw DomainError("median of nothing");
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Runs every task under seeds base, base+1, ... . Each cell writes its own
/// metrics into <out>/<task>_seed<k>/; failures are recorded and the grid goes on.
inline AblationResult run_ablation(const ExperimentConfig& base, const std::vector<AblationTask>& grid,
                                   const LabeledSet& data) {
    base.validate();
    if (grid.empty()) throw ConfigError("ablation grid is empty");
    const std::filesystem::path out_dir = base.out_dir;
    std::filesystem::create_directories(out_dir);

    AblationResult result;
    for (const auto& t : grid)
        for (std::size_t k = 0; k < base.ablation_seeds; ++k) result.cells.push_back({t, base.seed + k, {}, {}});

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < result.cells.size(); i = next++) {
            auto& cell = result.cells[i];
            ExperimentConfig c = base;
            c.clients = cell.task.clients;
            c.samples_per_client = cell.task.samples_per_client;
            c.discriminator = cell.task.discriminator;
            c.seed = cell.seed;
            c.record_transcript = false;
            c.out_dir = (out_dir / (cell.task.name + "_seed" + std::to_string(cell.seed))).string();
            try {
                cell.accuracy = run_experiment(c, data).final_eval.accuracy;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < std::min(base.jobs, result.cells.size()); ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::vector<double> with, without;
    for (const auto& t : grid) {
        std::vector<double> accs;
        for (const auto& cell : result.cells)
            if (cell.task.name == t.name && cell.accuracy) accs.push_back(*cell.accuracy);
        if (accs.empty()) continue;
        const double m = median(accs);
        result.task_median[t.name] = m;
        (t.discriminator ? with : without).push_back(m);
    }
    auto spread = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end());
    };
    result.spread_with = spread(with);
    result.spread_without = spread(without);

    std::string cells = "task,discriminator,clients,samples_per_client,seed,final_accuracy,status\n";
    for (const auto& cell : result.cells)
        cells += cell.task.name + "," + (cell.task.discriminator ? "yes" : "no") + "," +
                 std::to_string(cell.task.clients) + "," + std::to_string(cell.task.samples_per_client) + "," +
                 std::to_string(cell.seed) + "," + (cell.accuracy ? format_double(*cell.accuracy) : "") + "," +
                 (cell.accuracy ? "ok" : "failed") + "\n";
    write_atomically(out_dir / "ablation_cells.csv", cells);

    std::string table = "task,discriminator,clients,samples_per_client,median_accuracy\n";
    for (const auto& t : grid) {
        auto it = result.task_median.find(t.name);
        table += t.name + "," + (t.discriminator ? "yes" : "no") + "," + std::to_string(t.clients) + "," +
                 std::to_string(t.samples_per_client) + "," +
                 (it == result.task_median.end() ? "" : format_double(it->second)) + "\n";
    }
    table += "spread_without," + format_double(result.spread_without) + "\n";
    table += "spread_with," + format_double(result.spread_with) + "\n";
    write_atomically(out_dir / "metrics.csv", table);
    return result;
}

inline AblationResult run_ablation(const ExperimentConfig& base, const std::vector<AblationTask>& grid) {
    base.validate();
    return run_ablation(base, grid, load_mnist_train(base.resolved_data_dir()));
}

}  // namespace aftl
