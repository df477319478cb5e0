// aftl: run the federation, the ablation grid, or the gradient check.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "aftl/experiment.hpp"
#include "aftl/gradcheck.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kNumeric = 3 };

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> rounds;
    std::optional<std::size_t> clients;
    std::optional<std::size_t> samples;
    std::optional<double> shift;
    std::optional<std::string> out;
    bool no_disc = false;
    bool no_cons = false;
};

aftl::ExperimentConfig resolve(const Overrides& o) {
    aftl::ExperimentConfig c;
    if (!o.config.empty()) c = aftl::load_config(o.config);
    if (o.seed) c.seed = *o.seed;
    if (o.rounds) c.rounds = *o.rounds;
    if (o.clients) c.clients = *o.clients;
    if (o.samples) c.samples_per_client = *o.samples;
    if (o.shift) c.shift_degrees = *o.shift;
    if (o.out) c.out_dir = *o.out;
    if (o.no_disc) c.discriminator = false;
    if (o.no_cons) c.consistency = false;
    c.validate();
    return c;
}

int cmd_run(const Overrides& o) {
    const auto c = resolve(o);
    const auto data = aftl::load_mnist_train(c.resolved_data_dir());
    const auto r = aftl::run_experiment(c, data);
    std::printf("init accuracy %.4f\n", r.init_accuracy);
    for (const auto& row : r.rows)
        std::printf("round %3zu  Lc %.4f  Ld %.4f  Lp %.5f  acc %.4f\n", row.round, row.source_loss, row.domain_loss,
                    row.consistency_loss, row.target_accuracy);
    std::printf("final target accuracy %.4f (metrics in %s)\n", r.final_eval.accuracy, c.out_dir.c_str());
    return kOk;
}

int cmd_ablation(const Overrides& o, const std::string& tasks) {
    const auto c = resolve(o);
    auto grid = aftl::default_ablation_grid();
    if (!tasks.empty()) {
        std::vector<aftl::AblationTask> picked;
        std::stringstream ss(tasks);
        for (std::string name; std::getline(ss, name, ',');) {
            auto it = std::find_if(grid.begin(), grid.end(), [&](const auto& t) { return t.name == name; });
            if (it == grid.end()) throw aftl::ConfigError("unknown ablation task " + name);
            picked.push_back(*it);
        }
        grid = picked;
    }
    const auto data = aftl::load_mnist_train(c.resolved_data_dir());
    const auto r = aftl::run_ablation(c, grid, data);
    for (const auto& t : grid) {
        auto it = r.task_median.find(t.name);
        std::printf("%-3s disc=%-3s clients=%-2zu samples=%-4zu median acc %s\n", t.name.c_str(),
                    t.discriminator ? "yes" : "no", t.clients, t.samples_per_client,
                    it == r.task_median.end() ? "failed" : std::to_string(it->second).c_str());
    }
    for (const auto& cell : r.cells)
        if (!cell.accuracy) std::printf("cell %s seed %llu failed: %s\n", cell.task.name.c_str(),
                                        static_cast<unsigned long long>(cell.seed), cell.error.c_str());
    std::printf("spread without discriminator %.4f, with %.4f\n", r.spread_without, r.spread_with);
    return kOk;
}

int cmd_gradcheck(const Overrides& o, std::size_t probes) {
    const auto c = resolve(o);
    const auto entries = aftl::run_gradcheck(c.seed, probes);
    std::string csv = "check,probes,max_relative_error\n";
    bool ok = true;
    for (const auto& e : entries) {
        std::printf("%-28s probes=%zu max rel err %.3e\n", e.name.c_str(), e.probes, e.max_relative_error);
        csv += e.name + "," + std::to_string(e.probes) + "," + aftl::format_double(e.max_relative_error) + "\n";
        ok = ok && e.max_relative_error <= 1e-6;
    }
    std::filesystem::create_directories(c.out_dir);
    aftl::write_atomically(std::filesystem::path(c.out_dir) / "metrics.csv", csv);
    return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial federated transfer learning simulator"};
    app.require_subcommand(1);
    Overrides o;
    std::string tasks;
    std::size_t probes = 200;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "key=value config file");
        sub->add_option("--seed", o.seed, "base seed");
        sub->add_option("--out", o.out, "output directory");
    };
    auto add_training = [&](CLI::App* sub) {
        sub->add_option("--rounds", o.rounds, "federated rounds");
        sub->add_flag("--no-consistency", o.no_cons, "drop the consistency loss");
        sub->add_option("--shift-degrees", o.shift, "rotation applied to target images");
    };

    auto* run = app.add_subcommand("run", "initialization plus federated rounds");
    add_common(run);
    add_training(run);
    run->add_option("--clients", o.clients, "source clients");
    run->add_option("--samples-per-client", o.samples, "labeled samples per source client");
    run->add_flag("--no-discriminator", o.no_disc, "ablation: no client discriminator");

    auto* abl = app.add_subcommand("ablation", "A1-A4 / C1-C4 grid");
    add_common(abl);
    add_training(abl);
    abl->add_option("--tasks", tasks, "comma-separated subset of task names");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(gc);
    gc->add_option("--probes", probes, "probes per check")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*run) return cmd_run(o);
        if (*abl) return cmd_ablation(o, tasks);
        return cmd_gradcheck(o, probes);
    } catch (const aftl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const aftl::FormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const aftl::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    }
}
