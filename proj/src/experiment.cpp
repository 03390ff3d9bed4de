#include "rebias/experiment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace rebias::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* kArtifactVersion = "0.1.0";

namespace {

std::string now_utc() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

std::string checksum_hex(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read " + p.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write " + p.string());
    os << text;
    if (!os) throw IoError("write failed for " + p.string());
}

json load_json(const fs::path& p) {
    try {
        return json::parse(read_file(p));
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

}  // namespace

int cmd_generate(const ExperimentConfig& cfg, std::ostream& log) {
    validate_config(cfg);  // rejects bad rho before any I/O
    const auto dir = dataset_dir(cfg);
    const auto palette = palette_from_config(cfg);

    data::BiasConfig bc;
    bc.rho = cfg.dataset.rho;
    bc.split = data::Split::Train;
    bc.seed = cfg.dataset.seed;
    bc.background_threshold = cfg.dataset.background_threshold;

    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    if (fs::exists(manifest_path)) {
        try {
            const json m = load_json(manifest_path);
            const auto& mc = m.at("config");
            json pal = json::array();
            for (const auto& c : palette.colors) pal.push_back({c[0], c[1], c[2]});
            const bool same = mc.at("rho").get<double>() == bc.rho &&
                              mc.at("seed").get<std::uint64_t>() == bc.seed &&
                              mc.at("background_threshold").get<int>() == bc.background_threshold &&
                              mc.at("split").get<std::string>() == "train" &&
                              m.at("palette") == pal &&
                              m.at("num_samples").get<int>() == cfg.dataset.train_count;
            const auto samples = fs::path(dir) / "samples.bin";
            const std::uintmax_t want_size =
                static_cast<std::uintmax_t>(cfg.dataset.train_count) * (3 * data::kImagePixels + 10);
            if (same && fs::exists(samples) && fs::file_size(samples) == want_size) {
                log << "dataset " << dir << " up to date (checksum "
                    << m.at("checksum").get<std::string>() << ")\n";
                return kExitOk;
            }
        } catch (const std::exception&) {
            // fall through and regenerate
        }
    }

    try {
        const auto source = load_source(cfg, data::Split::Train);
        const auto dataset = data::build_dataset(bc, palette, source);
        data::save_dataset(dataset, dir);
        log << "dataset " << dir << " written (" << dataset.samples.size() << " samples, checksum "
            << checksum_hex(dataset.checksum()) << ")\n";
    } catch (const IoError&) {
        throw;
    } catch (const std::runtime_error& e) {
        throw IoError(e.what());
    }
    return kExitOk;
}

namespace {

json run_manifest(const ExperimentConfig& cfg, const std::string& dataset_checksum,
                  const std::string& started, const train::RunState& state) {
    json m;
    m["artifact_version"] = kArtifactVersion;
    m["config"] = render_config(cfg);
    m["dataset_checksum"] = dataset_checksum;
    m["started_utc"] = started;
    m["finished_utc"] = now_utc();
    m["status"] = state.diverged ? "diverged" : "completed";
    m["divergence_epoch"] = state.divergence_epoch;
    m["sigma_f"] = state.sigma_f;
    m["sigma_g"] = state.sigma_g;
    m["epochs_run"] = state.history.size();
    return m;
}

}  // namespace

int cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
    validate_config(cfg);
    const auto dir = run_dir(cfg);
    const auto ds_dir = dataset_dir(cfg);
    const fs::path manifest_path = fs::path(dir) / "manifest.json";

    if (fs::exists(manifest_path)) {
        const json m = load_json(manifest_path);
        if (m.value("config", "") == render_config(cfg)) {
            const std::string status = m.value("status", "");
            log << "run " << dir << " already " << status << "; skipping\n";
            return status == "diverged" ? kExitDiverged : kExitOk;
        }
    }

    if (!fs::exists(fs::path(ds_dir) / "manifest.json"))
        throw IoError("dataset not found at " + ds_dir + " (run `generate` first)");
    data::BiasedDataset dataset;
    try {
        dataset = data::load_dataset(ds_dir);
    } catch (const std::runtime_error& e) {
        throw IoError(e.what());
    }

    fs::create_directories(dir);
    const std::string started = now_utc();
    const auto trainer_cfg = trainer_from_config(cfg);
    const auto f_spec = f_spec_from_config(cfg);
    const auto g_spec = g_spec_from_config(cfg);

    std::ofstream metrics(fs::path(dir) / "metrics.csv");
    if (!metrics) throw IoError("cannot write " + dir + "/metrics.csv");
    metrics << train::metrics_csv_header() << "\n";
    const auto result = train::run_training(trainer_cfg, f_spec, g_spec, dataset,
                                            [&](const train::EpochMetrics& em) {
                                                metrics << train::metrics_csv_row(em) << "\n";
                                                metrics.flush();
                                            });
    metrics.close();

    if (result.has_f)
        nn::save_checkpoint((fs::path(dir) / "f.ckpt").string(), result.spec_f, result.params_f);
    if (result.has_g)
        nn::save_checkpoint((fs::path(dir) / "g.ckpt").string(), result.spec_g, result.params_g);

    const json manifest = run_manifest(cfg, checksum_hex(dataset.checksum()), started, result.state);
    write_file(manifest_path, manifest.dump(2) + "\n");

    if (result.state.diverged) {
        log << "run " << dir << " diverged at epoch " << result.state.divergence_epoch
            << " (gradient explosion); partial metrics kept\n";
        return kExitDiverged;
    }
    log << "run " << dir << " completed (" << result.state.history.size() << " epochs)\n";
    return kExitOk;
}

int cmd_evaluate(const std::string& run_directory, std::ostream& log) {
    const fs::path dir = run_directory;
    const json manifest = load_json(dir / "manifest.json");
    ExperimentConfig cfg;
    try {
        cfg = parse_config(manifest.at("config").get<std::string>());
    } catch (const std::exception& e) {
        throw IoError("manifest in " + run_directory + " is unusable: " + e.what());
    }
    const bool use_g = cfg.trainer.kind == "biased";
    const fs::path ckpt = dir / (use_g ? "g.ckpt" : "f.ckpt");
    if (!fs::exists(ckpt)) throw IoError("missing checkpoint " + ckpt.string());

    nn::ConvNetSpec spec;
    nn::ModelParams<float> params;
    try {
        nn::load_checkpoint(ckpt.string(), spec, params);
    } catch (const std::runtime_error& e) {
        throw IoError(e.what());
    }

    const auto val_source = load_source(cfg, data::Split::Val);
    const bool diverged = manifest.value("status", "") == "diverged";
    const auto report = bench::evaluate_pair(
        spec, params, cfg.trainer.kind, cfg.dataset.rho, cfg.trainer.seed, val_source,
        palette_from_config(cfg), cfg.dataset.seed, cfg.dataset.background_threshold, diverged);

    const fs::path eval_path = dir / "eval.csv";
    const bool fresh = !fs::exists(eval_path);
    std::ofstream os(eval_path, std::ios::app);
    if (!os) throw IoError("cannot write " + eval_path.string());
    if (fresh) os << "method,rho,seed,biased_acc,unbiased_acc,diverged\n";
    bench::MetricsTable one;
    one.rows.push_back(report);
    const std::string csv = one.to_csv();
    os << csv.substr(csv.find('\n') + 1);

    log << report.method << " rho=" << report.rho << " seed=" << report.seed
        << ": biased=" << report.biased_accuracy << " unbiased=" << report.unbiased_accuracy
        << (report.diverged ? " (diverged)" : "") << "\n";
    return kExitOk;
}

namespace {

std::vector<std::string> method_order(const bench::MetricsTable& table) {
    const std::vector<std::string> canonical = {"vanilla", "biased", "rubi", "rebias"};
    std::set<std::string> present;
    for (const auto& r : table.rows) present.insert(r.method);
    std::vector<std::string> out;
    for (const auto& m : canonical)
        if (present.count(m)) out.push_back(m);
    for (const auto& m : present)
        if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    return out;
}

std::vector<double> rho_order(const bench::MetricsTable& table) {
    std::set<double> rhos;
    for (const auto& r : table.rows) rhos.insert(r.rho);
    std::vector<double> out(rhos.begin(), rhos.end());
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

}  // namespace

std::string format_report_tables(const bench::MetricsTable& table) {
    const auto cells = bench::aggregate_runs(table);
    const auto methods = method_order(table);
    const auto rhos = rho_order(table);
    auto cell = [&](const std::string& m, double rho) -> const bench::AggregateCell* {
        for (const auto& c : cells)
            if (c.method == m && c.rho == rho) return &c;
        return nullptr;
    };

    std::ostringstream os;
    for (const bool unbiased : {false, true}) {
        os << "Validation accuracy on " << (unbiased ? "unbiased" : "biased")
           << " data (mean over seeds)\n";
        os << std::setw(8) << "rho";
        for (const auto& m : methods) os << std::setw(12) << m;
        os << "\n";
        for (double rho : rhos) {
            os << std::setw(8) << std::setprecision(4) << rho;
            for (const auto& m : methods) {
                const auto* c = cell(m, rho);
                if (!c) {
                    os << std::setw(12) << "-";
                    continue;
                }
                std::ostringstream v;
                v << std::fixed << std::setprecision(2)
                  << (unbiased ? c->mean_unbiased : c->mean_biased);
                if (c->any_diverged) v << "*";
                os << std::setw(12) << v.str();
            }
            os << "\n";
        }
        os << "\n";
    }
    os << "* at least one diverged run in the cell\n";
    return os.str();
}

std::string format_rho_curve(const bench::MetricsTable& table) {
    const auto cells = bench::aggregate_runs(table);
    const auto methods = method_order(table);
    auto rhos = rho_order(table);
    std::sort(rhos.begin(), rhos.end());
    std::ostringstream os;
    os << "# unbiased validation accuracy vs rho\n# rho";
    for (const auto& m : methods) os << " " << m;
    os << "\n";
    for (double rho : rhos) {
        os << std::setprecision(10) << rho;
        for (const auto& m : methods) {
            bool found = false;
            for (const auto& c : cells)
                if (c.method == m && c.rho == rho) {
                    os << " " << std::fixed << std::setprecision(4) << c.mean_unbiased;
                    found = true;
                    break;
                }
            if (!found) os << " nan";
            os.unsetf(std::ios::fixed);
        }
        os << "\n";
    }
    return os.str();
}

int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log) {
    validate_config(cfg);
    const fs::path sweep_root =
        cfg.output.run_dir.empty() ? fs::path(output_root(cfg)) / "sweep" : fs::path(cfg.output.run_dir);
    fs::create_directories(sweep_root);

    struct Cell {
        std::string method;
        double rho;
        std::uint64_t seed;
        ExperimentConfig config;
    };
    std::vector<Cell> cells;
    for (double rho : cfg.eval.rhos)
        for (const auto& method : cfg.eval.methods)
            for (const auto seed : cfg.eval.seeds) {
                ExperimentConfig c = cfg;
                c.dataset.rho = rho;
                c.dataset.dir.clear();
                c.trainer.kind = method;
                c.trainer.seed = seed;
                std::ostringstream rd;
                rd << (sweep_root / "runs").string() << "/" << method << "_rho";
                char buf[32];
                std::snprintf(buf, sizeof buf, "%g", rho);
                rd << buf << "_seed" << seed;
                c.output.run_dir = rd.str();
                cells.push_back({method, rho, seed, std::move(c)});
            }

    std::vector<bench::EvalReport> reports(cells.size());
    std::vector<std::string> failures(cells.size());
    std::mutex log_mutex;
    std::atomic<std::size_t> next{0};

    auto work = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            auto& cell = cells[i];
            std::ostringstream cell_log;
            try {
                cmd_generate(cell.config, cell_log);
                const int rc = cmd_train(cell.config, cell_log);
                const auto dir = run_dir(cell.config);
                const json manifest = load_json(fs::path(dir) / "manifest.json");
                const bool use_g = cell.method == "biased";
                nn::ConvNetSpec spec;
                nn::ModelParams<float> params;
                nn::load_checkpoint((fs::path(dir) / (use_g ? "g.ckpt" : "f.ckpt")).string(), spec,
                                    params);
                const auto val_source = load_source(cell.config, data::Split::Val);
                reports[i] = bench::evaluate_pair(
                    spec, params, cell.method, cell.rho, cell.seed, val_source,
                    palette_from_config(cell.config), cell.config.dataset.seed,
                    cell.config.dataset.background_threshold, rc == kExitDiverged);
                bench::MetricsTable one;
                one.rows.push_back(reports[i]);
                write_file(fs::path(dir) / "eval.csv", one.to_csv());
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
            std::lock_guard<std::mutex> lk(log_mutex);
            log << "[" << (i + 1) << "/" << cells.size() << "] " << cell.method
                << " rho=" << cell.rho << " seed=" << cell.seed;
            if (!failures[i].empty())
                log << " FAILED: " << failures[i] << "\n";
            else
                log << " biased=" << reports[i].biased_accuracy
                    << " unbiased=" << reports[i].unbiased_accuracy
                    << (reports[i].diverged ? " (diverged)" : "") << "\n";
            log << cell_log.str();
        }
    };

    const int workers = std::max(1, std::min<int>(cfg.sweep_workers,
                                                  static_cast<int>(cells.size())));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    bench::MetricsTable table;
    bool any_failed = false;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!failures[i].empty()) {
            any_failed = true;
            continue;
        }
        table.rows.push_back(reports[i]);
    }
    write_file(sweep_root / "metrics.csv", table.to_csv());
    write_file(sweep_root / "report.txt", format_report_tables(table));
    write_file(sweep_root / "figure_rho_curve.dat", format_rho_curve(table));
    log << "sweep table: " << (sweep_root / "metrics.csv").string() << "\n";
    log << format_report_tables(table);
    if (any_failed) {
        log << "some cells failed; see messages above\n";
        return kExitIo;
    }
    for (const auto& r : table.rows)
        if (r.diverged) return kExitDiverged;
    return kExitOk;
}

int cmd_report(const std::string& metrics_csv_path, const std::string& out_dir,
               std::ostream& log) {
    fs::path path = metrics_csv_path;
    if (fs::is_directory(path)) path /= "metrics.csv";
    bench::MetricsTable table;
    try {
        table = bench::MetricsTable::from_csv(read_file(path));
    } catch (const std::runtime_error& e) {
        throw IoError(e.what());
    }
    const std::string tables = format_report_tables(table);
    const std::string curve = format_rho_curve(table);
    log << tables;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "report.txt", tables);
        write_file(fs::path(out_dir) / "figure_rho_curve.dat", curve);
        log << "wrote " << (fs::path(out_dir) / "report.txt").string() << " and "
            << (fs::path(out_dir) / "figure_rho_curve.dat").string() << "\n";
    }
    return kExitOk;
}

}  // namespace rebias::cli
