#include "rebias/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace rebias::bench {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            f.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    f.push_back(cur);
    return f;
}

}  // namespace

bool operator==(const EvalReport& a, const EvalReport& b) {
    return a.method == b.method && a.rho == b.rho && a.seed == b.seed &&
           a.biased_accuracy == b.biased_accuracy && a.unbiased_accuracy == b.unbiased_accuracy &&
           a.diverged == b.diverged;
}

bool operator==(const MetricsTable& a, const MetricsTable& b) { return a.rows == b.rows; }

std::string MetricsTable::to_csv() const {
    std::ostringstream os;
    os << "method,rho,seed,biased_acc,unbiased_acc,diverged\n";
    for (const auto& r : rows)
        os << r.method << ',' << fmt(r.rho) << ',' << r.seed << ',' << fmt(r.biased_accuracy)
           << ',' << fmt(r.unbiased_accuracy) << ',' << (r.diverged ? "true" : "false") << "\n";
    return os.str();
}

MetricsTable MetricsTable::from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    MetricsTable t;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            if (line != "method,rho,seed,biased_acc,unbiased_acc,diverged")
                throw std::runtime_error("metrics table: unexpected header '" + line + "'");
            first = false;
            continue;
        }
        const auto f = split_csv(line);
        if (f.size() != 6)
            throw std::runtime_error("metrics table: malformed row '" + line + "'");
        EvalReport r;
        r.method = f[0];
        r.rho = std::stod(f[1]);
        r.seed = std::stoull(f[2]);
        r.biased_accuracy = std::stod(f[3]);
        r.unbiased_accuracy = std::stod(f[4]);
        r.diverged = f[5] == "true";
        t.rows.push_back(r);
    }
    return t;
}

std::vector<AggregateCell> aggregate_runs(const MetricsTable& table) {
    std::map<std::pair<std::string, double>, std::vector<const EvalReport*>> groups;
    for (const auto& r : table.rows) groups[{r.method, r.rho}].push_back(&r);
    std::vector<AggregateCell> out;
    for (const auto& [key, rs] : groups) {
        AggregateCell c;
        c.method = key.first;
        c.rho = key.second;
        c.count = static_cast<int>(rs.size());
        double sb = 0.0, su = 0.0;
        for (const auto* r : rs) {
            sb += r->biased_accuracy;
            su += r->unbiased_accuracy;
            c.any_diverged = c.any_diverged || r->diverged;
        }
        c.mean_biased = sb / c.count;
        c.mean_unbiased = su / c.count;
        if (c.count > 1) {
            double vb = 0.0, vu = 0.0;
            for (const auto* r : rs) {
                vb += (r->biased_accuracy - c.mean_biased) * (r->biased_accuracy - c.mean_biased);
                vu += (r->unbiased_accuracy - c.mean_unbiased) *
                      (r->unbiased_accuracy - c.mean_unbiased);
            }
            c.std_biased = std::sqrt(vb / (c.count - 1));
            c.std_unbiased = std::sqrt(vu / (c.count - 1));
        }
        out.push_back(c);
    }
    return out;
}

namespace {

std::vector<int> predictions(const nn::ConvNetSpec& spec, const nn::ModelParams<float>& params,
                             const data::BiasedDataset& dataset, int batch_size) {
    const int n = static_cast<int>(dataset.samples.size());
    std::vector<int> preds(static_cast<std::size_t>(n));
    for (int start = 0; start < n; start += batch_size) {
        const int sz = std::min(batch_size, n - start);
        std::vector<int> idx(static_cast<std::size_t>(sz));
        for (int i = 0; i < sz; ++i) idx[static_cast<std::size_t>(i)] = start + i;
        const auto batch = data::to_batch(dataset, idx);
        const auto res = nn::forward(spec, params, batch, nn::Mode::Eval);
        const int c = res.logits.dim(1);
        for (int i = 0; i < sz; ++i) {
            const float* row = res.logits.data() + static_cast<std::ptrdiff_t>(i) * c;
            int best = 0;
            for (int j = 1; j < c; ++j)
                if (row[j] > row[best]) best = j;
            preds[static_cast<std::size_t>(start + i)] = best;
        }
    }
    return preds;
}

}  // namespace

double accuracy(const nn::ConvNetSpec& spec, const nn::ModelParams<float>& params,
                const data::BiasedDataset& dataset, int batch_size) {
    if (dataset.samples.empty()) throw std::invalid_argument("accuracy: empty dataset");
    const auto preds = predictions(spec, params, dataset, batch_size);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == dataset.samples[i].digit_label) ++correct;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(preds.size());
}

std::uint64_t validation_seed(std::uint64_t dataset_seed, bool unbiased) {
    return nn::mix_seed(dataset_seed, 0x56414CULL, unbiased ? 1 : 0);
}

EvalReport evaluate_pair(const nn::ConvNetSpec& spec, const nn::ModelParams<float>& params,
                         const std::string& method, double rho_train, std::uint64_t seed,
                         const data::SourceDigits& val_source, const data::BiasPalette& palette,
                         std::uint64_t dataset_seed, int background_threshold, bool diverged) {
    data::BiasConfig biased_cfg;
    biased_cfg.rho = rho_train;
    biased_cfg.split = data::Split::Val;
    biased_cfg.seed = validation_seed(dataset_seed, false);
    biased_cfg.background_threshold = background_threshold;
    data::BiasConfig unbiased_cfg = biased_cfg;
    unbiased_cfg.rho = kUnbiasedRho;
    unbiased_cfg.seed = validation_seed(dataset_seed, true);

    EvalReport r;
    r.method = method;
    r.rho = rho_train;
    r.seed = seed;
    r.diverged = diverged;
    r.biased_accuracy =
        accuracy(spec, params, data::build_dataset(biased_cfg, palette, val_source));
    r.unbiased_accuracy =
        accuracy(spec, params, data::build_dataset(unbiased_cfg, palette, val_source));
    return r;
}

std::vector<int> kmeans(const std::vector<std::vector<double>>& points, int k,
                        std::mt19937_64& rng, int max_iter, double tol) {
    const int n = static_cast<int>(points.size());
    if (k < 1 || n < k) throw std::invalid_argument("kmeans: need 1 <= k <= number of points");
    const std::size_t d = points[0].size();
    auto dist2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
        return s;
    };
    auto uniform = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };

    // k-means++ seeding
    std::vector<std::vector<double>> centers;
    centers.push_back(points[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(n))]);
    std::vector<double> best(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) best[static_cast<std::size_t>(i)] = dist2(points[static_cast<std::size_t>(i)], centers[0]);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (double b : best) total += b;
        int chosen = -1;
        if (total > 0.0) {
            const double target = uniform() * total;
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += best[static_cast<std::size_t>(i)];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
            if (chosen < 0) chosen = n - 1;
        } else {
            chosen = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
        }
        centers.push_back(points[static_cast<std::size_t>(chosen)]);
        for (int i = 0; i < n; ++i) {
            const double e = dist2(points[static_cast<std::size_t>(i)], centers.back());
            if (e < best[static_cast<std::size_t>(i)]) best[static_cast<std::size_t>(i)] = e;
        }
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < max_iter; ++it) {
        for (int i = 0; i < n; ++i) {
            int arg = 0;
            double bd = dist2(points[static_cast<std::size_t>(i)], centers[0]);
            for (int c = 1; c < k; ++c) {
                const double e = dist2(points[static_cast<std::size_t>(i)], centers[static_cast<std::size_t>(c)]);
                if (e < bd) {  // strict: ties keep the lowest index
                    bd = e;
                    arg = c;
                }
            }
            assign[static_cast<std::size_t>(i)] = arg;
        }
        std::vector<std::vector<double>> next(static_cast<std::size_t>(k),
                                              std::vector<double>(d, 0.0));
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            const int c = assign[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(c)];
            for (std::size_t j = 0; j < d; ++j)
                next[static_cast<std::size_t>(c)][j] += points[static_cast<std::size_t>(i)][j];
        }
        double moved = 0.0;
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) continue;  // keep previous centroid
            for (std::size_t j = 0; j < d; ++j)
                next[static_cast<std::size_t>(c)][j] /= counts[static_cast<std::size_t>(c)];
            moved = std::max(moved, std::sqrt(dist2(next[static_cast<std::size_t>(c)],
                                                    centers[static_cast<std::size_t>(c)])));
            centers[static_cast<std::size_t>(c)] = std::move(next[static_cast<std::size_t>(c)]);
        }
        if (moved < tol) break;
    }
    return assign;
}

std::vector<std::vector<double>> texture_descriptors(const nn::ConvNetSpec& spec,
                                                     const nn::ModelParams<float>& params,
                                                     const data::BiasedDataset& dataset,
                                                     int batch_size) {
    const int n = static_cast<int>(dataset.samples.size());
    std::vector<std::vector<double>> desc(static_cast<std::size_t>(n));
    const int c1 = spec.channels.front();
    for (int start = 0; start < n; start += batch_size) {
        const int sz = std::min(batch_size, n - start);
        std::vector<int> idx(static_cast<std::size_t>(sz));
        for (int i = 0; i < sz; ++i) idx[static_cast<std::size_t>(i)] = start + i;
        const auto batch = data::to_batch(dataset, idx);
        nn::ForwardCache<float> cache;
        (void)nn::forward(spec, params, batch, nn::Mode::Eval, &cache);
        const auto& maps = cache.blocks.front().relu_out;  // (sz, c1, h, w)
        const int hw = maps.dim(2) * maps.dim(3);
        for (int i = 0; i < sz; ++i) {
            std::vector<double> g(static_cast<std::size_t>(c1) * c1, 0.0);
            const float* base = maps.data() + static_cast<std::ptrdiff_t>(i) * c1 * hw;
            for (int a = 0; a < c1; ++a)
                for (int b = a; b < c1; ++b) {
                    const float* ra = base + static_cast<std::ptrdiff_t>(a) * hw;
                    const float* rb = base + static_cast<std::ptrdiff_t>(b) * hw;
                    double s = 0.0;
                    for (int p = 0; p < hw; ++p) s += static_cast<double>(ra[p]) * rb[p];
                    g[static_cast<std::size_t>(a) * c1 + b] = s;
                    g[static_cast<std::size_t>(b) * c1 + a] = s;
                }
            double norm = 0.0;
            for (double v : g) norm += v * v;
            norm = std::sqrt(norm);
            if (norm > 0.0)
                for (double& v : g) v /= norm;
            desc[static_cast<std::size_t>(start + i)] = std::move(g);
        }
    }
    return desc;
}

ClusterReport texture_cluster_unbiased_accuracy(const nn::ConvNetSpec& spec,
                                                const nn::ModelParams<float>& params,
                                                const data::BiasedDataset& dataset,
                                                int n_clusters, std::mt19937_64& rng,
                                                int batch_size) {
    const int n = static_cast<int>(dataset.samples.size());
    if (n < n_clusters)
        throw std::invalid_argument("texture_cluster_unbiased_accuracy: dataset smaller than k");
    const auto desc = texture_descriptors(spec, params, dataset, batch_size);
    const auto assign = kmeans(desc, n_clusters, rng);
    const auto preds = predictions(spec, params, dataset, batch_size);

    ClusterReport rep;
    rep.n_clusters = n_clusters;
    rep.cluster_sizes.assign(static_cast<std::size_t>(n_clusters), 0);
    std::vector<int> correct(static_cast<std::size_t>(n_clusters), 0);
    for (int i = 0; i < n; ++i) {
        const int c = assign[static_cast<std::size_t>(i)];
        ++rep.cluster_sizes[static_cast<std::size_t>(c)];
        if (preds[static_cast<std::size_t>(i)] == dataset.samples[static_cast<std::size_t>(i)].digit_label)
            ++correct[static_cast<std::size_t>(c)];
    }
    rep.per_cluster_accuracy.assign(static_cast<std::size_t>(n_clusters), -1.0);
    double sum = 0.0;
    int nonempty = 0;
    for (int c = 0; c < n_clusters; ++c) {
        if (rep.cluster_sizes[static_cast<std::size_t>(c)] == 0) {
            ++rep.empty_clusters;
            continue;
        }
        const double acc = 100.0 * correct[static_cast<std::size_t>(c)] /
                           rep.cluster_sizes[static_cast<std::size_t>(c)];
        rep.per_cluster_accuracy[static_cast<std::size_t>(c)] = acc;
        sum += acc;
        ++nonempty;
    }
    rep.mean = nonempty > 0 ? sum / nonempty : 0.0;
    return rep;
}

MetricsTable rho_sweep(const SweepRequest& req, const data::SourceDigits& train_source,
                       const data::SourceDigits& val_source,
                       const std::function<void(const EvalReport&)>& on_cell) {
    MetricsTable table;
    for (double rho : req.rhos) {
        data::BiasConfig cfg;
        cfg.rho = rho;
        cfg.split = data::Split::Train;
        cfg.seed = nn::mix_seed(req.dataset_seed, 0x7281A5ULL);
        cfg.background_threshold = req.background_threshold;
        const auto dataset = data::build_dataset(cfg, req.palette, train_source);
        for (const auto method : req.methods) {
            for (const auto seed : req.seeds) {
                train::TrainerConfig tc = req.base_trainer;
                tc.kind = method;
                tc.seed = seed;
                const auto result = train::run_training(tc, req.f_spec, req.g_spec, dataset);
                const bool use_g = method == train::Kind::Biased;
                const auto& spec = use_g ? result.spec_g : result.spec_f;
                const auto& params = use_g ? result.params_g : result.params_f;
                auto report = evaluate_pair(spec, params, train::kind_name(method), rho, seed,
                                            val_source, req.palette, req.dataset_seed,
                                            req.background_threshold, result.state.diverged);
                table.rows.push_back(report);
                if (on_cell) on_cell(report);
            }
        }
    }
    return table;
}

}  // namespace rebias::bench
