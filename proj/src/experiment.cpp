#include "delta/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "delta/binary_io.hpp"
#include "delta/checkpoint.hpp"
#include "delta/errors.hpp"
#include "json.hpp"

namespace delta {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

std::uint64_t parse_hex64(const std::string& text) {
    if (text.size() != 16) throw ValidationError("expected 16 hex digits, got '" + text + "'");
    std::size_t used = 0;
    const auto value = std::stoull(text, &used, 16);
    if (used != 16) throw ValidationError("bad hex value '" + text + "'");
    return value;
}

std::string run_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

void validate(const ExperimentConfig& c) {
    validate(c.regularizer);
    validate(c.schedule);
    if (c.seeds.empty()) throw ConfigError("seeds must be non-empty");
    if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
        throw ConfigError("seeds must be distinct");
    }
    if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (c.momentum < 0.0 || c.momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (!c.alpha_candidates.empty() && c.cv_folds < 2) throw ConfigError("cv_folds must be at least 2");
    for (double a : c.alpha_candidates) {
        if (!std::isfinite(a) || a < 0.0) throw ConfigError("alpha candidates must be finite and non-negative");
    }
    if (c.fe_epochs == 0 || !(c.fe_lr > 0.0)) throw ConfigError("fe_head needs positive epochs and lr");
    if (c.out_dir.empty()) throw ConfigError("out_dir must be set");
    for (const auto& [name, path] : {std::pair{"source_checkpoint", c.source_checkpoint},
                                     std::pair{"train_data", c.train_data}}) {
        if (path.empty()) throw ConfigError(std::string(name) + " is required");
        if (!fs::exists(path)) throw ConfigError(std::string(name) + " does not exist: " + path.string());
    }
    if (!c.test_data.empty() && !fs::exists(c.test_data)) {
        throw ConfigError("test_data does not exist: " + c.test_data.string());
    }
}

ExperimentConfig experiment_config_from_json(const std::string& text, const fs::path& base_dir) {
    ExperimentConfig c;
    try {
        const auto j = json::parse(text);
        if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
        static const std::set<std::string> known{
            "source_checkpoint", "train_data", "test_data", "attention_cache", "kind", "alpha", "beta",
            "alpha_candidates", "cv_folds", "normalize_by_area", "schedule", "momentum", "iterations",
            "batch_size", "log_every", "augment", "ten_crop", "taps", "fe_head", "seeds", "out_dir"};
        for (const auto& [key, _] : j.items()) {
            if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
        }
        c.source_checkpoint = resolve(base_dir, j.value("source_checkpoint", std::string{}));
        c.train_data = resolve(base_dir, j.value("train_data", std::string{}));
        c.test_data = resolve(base_dir, j.value("test_data", std::string{}));
        c.attention_cache = resolve(base_dir, j.value("attention_cache", std::string{}));
        if (j.contains("kind")) c.regularizer.kind = regularizer_kind_from_string(j.at("kind").get<std::string>());
        c.regularizer.alpha = j.value("alpha", c.regularizer.alpha);
        c.regularizer.beta = j.value("beta", c.regularizer.beta);
        c.regularizer.normalize_by_area = j.value("normalize_by_area", false);
        c.alpha_candidates = j.value("alpha_candidates", std::vector<double>{});
        c.cv_folds = j.value("cv_folds", c.cv_folds);
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            if (s.contains("kind")) c.schedule.kind = schedule_kind_from_string(s.at("kind").get<std::string>());
            c.schedule.base_lr = s.value("base_lr", c.schedule.base_lr);
            c.schedule.factor = s.value("factor", c.schedule.factor);
            c.schedule.step = s.value("step", c.schedule.step);
        }
        c.momentum = j.value("momentum", c.momentum);
        c.iterations = j.value("iterations", c.iterations);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.log_every = j.value("log_every", c.log_every);
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            if (a.contains("resize_shorter") && !a.at("resize_shorter").is_null()) {
                c.augment.resize_shorter = a.at("resize_shorter").get<std::size_t>();
            }
            c.augment.crop = a.value("crop", c.augment.crop);
            c.augment.mirror = a.value("mirror", c.augment.mirror);
            if (a.contains("mean")) {
                c.augment.mean = a.at("mean").get<std::vector<double>>();
                c.mean_from_train = false;
            }
        }
        c.ten_crop = j.value("ten_crop", c.ten_crop);
        c.taps = j.value("taps", std::vector<std::size_t>{});
        if (j.contains("fe_head")) {
            const auto& f = j.at("fe_head");
            c.fe_epochs = f.value("epochs", c.fe_epochs);
            c.fe_lr = f.value("lr", c.fe_lr);
            c.fe_seed = f.value("seed", c.fe_seed);
        }
        c.seeds = j.value("seeds", c.seeds);
        if (j.contains("out_dir")) c.out_dir = resolve(base_dir, j.at("out_dir").get<std::string>());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad experiment config: ") + e.what());
    }
    return c;
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["source_checkpoint"] = c.source_checkpoint.string();
    j["train_data"] = c.train_data.string();
    if (!c.test_data.empty()) j["test_data"] = c.test_data.string();
    if (!c.attention_cache.empty()) j["attention_cache"] = c.attention_cache.string();
    j["kind"] = to_string(c.regularizer.kind);
    j["alpha"] = c.regularizer.alpha;
    j["beta"] = c.regularizer.beta;
    j["normalize_by_area"] = c.regularizer.normalize_by_area;
    j["alpha_candidates"] = c.alpha_candidates;
    j["cv_folds"] = c.cv_folds;
    j["schedule"] = {{"kind", to_string(c.schedule.kind)},
                     {"base_lr", c.schedule.base_lr},
                     {"factor", c.schedule.factor},
                     {"step", c.schedule.step}};
    j["momentum"] = c.momentum;
    j["iterations"] = c.iterations;
    j["batch_size"] = c.batch_size;
    j["log_every"] = c.log_every;
    json a{{"crop", c.augment.crop}, {"mirror", c.augment.mirror}};
    if (c.augment.resize_shorter) a["resize_shorter"] = *c.augment.resize_shorter;
    if (!c.mean_from_train) a["mean"] = c.augment.mean;
    j["augment"] = a;
    j["ten_crop"] = c.ten_crop;
    j["taps"] = c.taps;
    j["fe_head"] = {{"epochs", c.fe_epochs}, {"lr", c.fe_lr}, {"seed", c.fe_seed}};
    j["seeds"] = c.seeds;
    j["out_dir"] = c.out_dir.string();
    return j.dump(2) + "\n";
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    return experiment_config_from_json(read_text(path), path.parent_path());
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
    if (values.empty()) throw ContractError("mean_std of an empty list");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() < 2) return {mean, 0.0};
    double sq = 0.0;
    for (double v : values) sq += (v - mean) * (v - mean);
    return {mean, std::sqrt(sq / (n - 1.0))};
}

std::string format_summary_json(const ExperimentSummary& s) {
    json j;
    j["summary"] = {{to_string(s.kind), {{"mean_acc", s.mean_acc}, {"std_acc", s.std_acc}}}};
    j["kind"] = to_string(s.kind);
    j["alpha"] = s.alpha;
    j["beta"] = s.beta;
    j["seeds"] = s.seeds;
    j["final_acc"] = s.final_acc;
    j["train_hash"] = hex64(s.train_hash);
    j["test_hash"] = hex64(s.test_hash);
    j["source_hash"] = hex64(s.source_hash);
    return j.dump(2) + "\n";
}

ExperimentSummary parse_summary_json(const std::string& text) {
    try {
        const auto j = json::parse(text);
        ExperimentSummary s;
        s.kind = regularizer_kind_from_string(j.at("kind").get<std::string>());
        const auto& entry = j.at("summary").at(to_string(s.kind));
        s.mean_acc = entry.at("mean_acc").get<double>();
        s.std_acc = entry.at("std_acc").get<double>();
        s.alpha = j.at("alpha").get<double>();
        s.beta = j.at("beta").get<double>();
        s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        s.final_acc = j.at("final_acc").get<std::vector<double>>();
        s.train_hash = parse_hex64(j.at("train_hash").get<std::string>());
        s.test_hash = parse_hex64(j.at("test_hash").get<std::string>());
        s.source_hash = parse_hex64(j.at("source_hash").get<std::string>());
        if (s.seeds.size() != s.final_acc.size() || s.seeds.empty()) {
            throw ValidationError("summary seeds and final_acc disagree in length");
        }
        return s;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad summary JSON: ") + e.what());
    }
}

std::string format_manifest(const Manifest& m) {
    json stages = json::array();
    for (const auto& s : m.stages) stages.push_back({{"name", s.name}, {"status", s.status}});
    json j{{"status", m.status}, {"stages", stages}, {"files", m.files}};
    if (!m.error.empty()) j["error"] = m.error;
    return j.dump(2) + "\n";
}

Manifest parse_manifest(const std::string& text) {
    try {
        const auto j = json::parse(text);
        Manifest m;
        m.status = j.at("status").get<std::string>();
        for (const auto& s : j.at("stages")) m.stages.push_back({s.at("name"), s.at("status")});
        m.files = j.at("files").get<std::vector<std::string>>();
        m.error = j.value("error", std::string{});
        return m;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad MANIFEST: ") + e.what());
    }
}

Manifest read_manifest(const fs::path& run_dir) { return parse_manifest(read_text(run_dir / "MANIFEST")); }

namespace {

class ManifestWriter {
public:
    explicit ManifestWriter(fs::path dir) : dir_(std::move(dir)) { flush(); }

    void begin(const std::string& stage) {
        manifest_.stages.push_back({stage, "running"});
        flush();
    }
    void end(const std::string& status = "done") {
        manifest_.stages.back().status = status;
        flush();
    }
    void skip(const std::string& stage) {
        manifest_.stages.push_back({stage, "skipped"});
        flush();
    }
    void file(const std::string& rel) { manifest_.files.push_back(rel); }
    void complete() {
        manifest_.status = "complete";
        flush();
    }
    void fail(const std::string& error) {
        manifest_.status = "failed";
        manifest_.error = error;
        if (!manifest_.stages.empty() && manifest_.stages.back().status == "running") {
            manifest_.stages.back().status = "failed";
        }
        flush();
    }

private:
    void flush() { write_text(dir_ / "MANIFEST", format_manifest(manifest_)); }

    fs::path dir_;
    Manifest manifest_;
};

TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
    TrainConfig t;
    t.regularizer = c.regularizer;
    t.schedule = c.schedule;
    t.momentum = c.momentum;
    t.iterations = c.iterations;
    t.batch_size = c.batch_size;
    t.log_every = c.log_every;
    t.seed = seed;
    t.augment = c.augment;
    t.ten_crop_eval = c.ten_crop;
    return t;
}

bool uses_alpha(RegularizerKind kind) { return kind != RegularizerKind::L2FE; }

std::string cv_json(const CrossValidation& cv) {
    json j{{"best_alpha", cv.best_alpha},
           {"alphas", cv.alphas},
           {"mean_accuracy", cv.mean_accuracy},
           {"fold_accuracy", cv.fold_accuracy}};
    return j.dump(2) + "\n";
}

struct Inputs {
    ExperimentConfig config;  // mean and taps resolved
    ConvNetModel source;
    Dataset train_set;
    std::optional<Dataset> test_set;
};

Inputs load_inputs(const ExperimentConfig& config) {
    Inputs in{config, load_checkpoint(config.source_checkpoint), load_dataset(config.train_data, Split::Train), {}};
    if (!config.test_data.empty()) in.test_set = load_dataset(config.test_data, Split::Test);
    if (in.test_set && in.test_set->num_classes() != in.train_set.num_classes()) {
        throw ValidationError("train and test sets disagree on the class count");
    }
    if (in.config.mean_from_train) in.config.augment.mean = in.train_set.channel_mean();
    if (!in.config.taps.empty()) in.source.set_taps(in.config.taps);
    return in;
}

AttentionTable attention_for(const Inputs& in) {
    const auto& c = in.config;
    const ConvNetModel spar = spar_init(in.source, in.train_set.num_classes(), c.fe_seed);
    const ConvNetModel fe =
        train_fe_head(spar, in.train_set, {.epochs = c.fe_epochs, .lr = c.fe_lr, .seed = c.fe_seed, .view = c.augment});
    AttentionOptions opts;
    opts.view = c.augment;
    if (!c.attention_cache.empty()) opts.cache = c.attention_cache;
    return build_attention_table(fe, in.train_set, fe.tap_layers(), opts);
}

ExperimentSummary run_stages(const ExperimentConfig& input, ManifestWriter& manifest) {
    manifest.begin("load");
    const Inputs in = load_inputs(input);
    ExperimentConfig c = in.config;
    const auto& source = in.source;
    const auto& train_set = in.train_set;
    const auto& test_set = in.test_set;
    manifest.end();

    std::optional<AttentionTable> table;
    if (c.regularizer.kind == RegularizerKind::DELTA) {
        manifest.begin("attention");
        table = attention_for(in);
        manifest.end();
    } else {
        manifest.skip("attention");
    }
    const AttentionTable* attention = table ? &*table : nullptr;

    if (!c.alpha_candidates.empty() && uses_alpha(c.regularizer.kind)) {
        manifest.begin("cross_validate");
        const auto cv = cross_validate_alpha(source, train_set, c.alpha_candidates, train_config(c, c.seeds.front()),
                                             attention, c.cv_folds);
        c.regularizer.alpha = cv.best_alpha;
        write_text(c.out_dir / "cv.json", cv_json(cv));
        manifest.file("cv.json");
        manifest.end();
    } else {
        manifest.skip("cross_validate");
    }

    ExperimentSummary summary;
    summary.kind = c.regularizer.kind;
    summary.alpha = c.regularizer.alpha;
    summary.beta = c.regularizer.beta;
    summary.train_hash = train_set.hash();
    summary.test_hash = test_set ? test_set->hash() : 0;
    summary.source_hash = source_fingerprint(spar_init(source, train_set.num_classes(), 0));

    fs::create_directories(c.out_dir / "metrics");
    fs::create_directories(c.out_dir / "checkpoints");
    for (std::uint64_t seed : c.seeds) {
        manifest.begin("finetune_" + run_name(seed));
        const auto result =
            fine_tune(source, train_set, test_set ? &*test_set : nullptr, train_config(c, seed), attention);
        const std::string csv = "metrics/" + run_name(seed) + ".csv";
        const std::string ckpt = "checkpoints/" + run_name(seed) + ".ckpt";
        write_metrics_csv(result.log, c.out_dir / csv);
        save_checkpoint(result.model, c.out_dir / ckpt);
        manifest.file(csv);
        manifest.file(ckpt);
        summary.seeds.push_back(seed);
        summary.final_acc.push_back(result.log.back().test_acc);
        manifest.end();
    }
    if (test_set) {
        std::tie(summary.mean_acc, summary.std_acc) = mean_std(summary.final_acc);
    } else {
        summary.mean_acc = summary.std_acc = std::nan("");
    }
    return summary;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& config) {
    validate(config);
    fs::create_directories(config.out_dir);
    ManifestWriter manifest(config.out_dir);
    try {
        write_text(config.out_dir / "config.json", experiment_config_to_json(config));
        manifest.file("config.json");
        auto summary = run_stages(config, manifest);
        manifest.begin("summary");
        write_text(config.out_dir / "summary.json", format_summary_json(summary));
        manifest.file("summary.json");
        manifest.end();
        manifest.complete();
        return summary;
    } catch (const std::exception& e) {
        manifest.fail(e.what());
        throw;
    }
}

CrossValidation run_cross_validation(const ExperimentConfig& config) {
    validate(config);
    if (config.alpha_candidates.empty()) throw ConfigError("cross-validation needs alpha_candidates");
    const Inputs in = load_inputs(config);
    std::optional<AttentionTable> table;
    if (in.config.regularizer.kind == RegularizerKind::DELTA) table = attention_for(in);
    const auto cv = cross_validate_alpha(in.source, in.train_set, in.config.alpha_candidates,
                                         train_config(in.config, in.config.seeds.front()), table ? &*table : nullptr,
                                         in.config.cv_folds);
    write_text(config.out_dir / "cv.json", cv_json(cv));
    return cv;
}

Comparison compare_methods(const std::vector<fs::path>& run_dirs, const StageGrouping& grouping) {
    if (run_dirs.empty()) throw ConfigError("compare needs at least one run directory");
    std::vector<ExperimentSummary> summaries;
    for (const auto& dir : run_dirs) {
        const auto manifest = read_manifest(dir);
        if (manifest.status != "complete") throw ValidationError(dir.string() + " is not a complete run");
        summaries.push_back(parse_summary_json(read_text(dir / "summary.json")));
    }
    const auto& first = summaries.front();
    std::set<RegularizerKind> seen;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        const auto& s = summaries[i];
        if (s.train_hash != first.train_hash || s.test_hash != first.test_hash) {
            throw ValidationError("dataset hashes differ between " + run_dirs.front().string() + " and " +
                                  run_dirs[i].string());
        }
        if (s.source_hash != first.source_hash) {
            throw ValidationError("source models differ between " + run_dirs.front().string() + " and " +
                                  run_dirs[i].string());
        }
        if (s.seeds != first.seeds) {
            throw ValidationError("seed lists differ between " + run_dirs.front().string() + " and " +
                                  run_dirs[i].string());
        }
        if (!seen.insert(s.kind).second) throw ValidationError("method " + to_string(s.kind) + " listed twice");
    }

    Comparison out;
    std::optional<std::size_t> delta_idx, l2sp_idx;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        const auto& s = summaries[i];
        out.rows.push_back({to_string(s.kind), s.mean_acc, s.std_acc, s.seeds.size()});
        if (s.kind == RegularizerKind::DELTA) delta_idx = i;
        if (s.kind == RegularizerKind::L2SP) l2sp_idx = i;
    }
    if (delta_idx && l2sp_idx) {
        std::size_t larger = 0, total = 0;
        for (std::uint64_t seed : first.seeds) {
            const std::string ckpt = "checkpoints/" + run_name(seed) + ".ckpt";
            const auto a = param_distance_report(load_checkpoint(run_dirs[*delta_idx] / ckpt), grouping);
            const auto b = param_distance_report(load_checkpoint(run_dirs[*l2sp_idx] / ckpt), grouping);
            larger_distance_fraction(a, b);  // validates that both cover the same filters
            for (std::size_t i = 0; i < a.filters.size(); ++i) larger += a.filters[i].distance > b.filters[i].distance;
            total += a.filters.size();
        }
        out.delta_vs_l2sp_larger_fraction = static_cast<double>(larger) / static_cast<double>(total);
    }
    return out;
}

std::string format_comparison_csv(const Comparison& comparison) {
    std::string out = "method,mean_acc,std_acc,seeds\n";
    for (const auto& r : comparison.rows) {
        out += r.method + "," + format_real(r.mean_acc) + "," + format_real(r.std_acc) + "," +
               std::to_string(r.seeds) + "\n";
    }
    return out;
}

std::vector<ComparisonRow> parse_comparison_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "method,mean_acc,std_acc,seeds") {
        throw ParseError("comparison CSV header mismatch", 0);
    }
    std::vector<ComparisonRow> rows;
    std::uint64_t offset = line.size() + 1;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        if (cells.size() != 4) throw ParseError("comparison CSV row needs 4 fields", offset);
        try {
            std::size_t used = 0;
            ComparisonRow r;
            r.method = cells[0];
            r.mean_acc = std::stod(cells[1], &used);
            if (used != cells[1].size()) throw std::invalid_argument("trailing");
            r.std_acc = std::stod(cells[2], &used);
            if (used != cells[2].size()) throw std::invalid_argument("trailing");
            r.seeds = std::stoull(cells[3], &used);
            if (used != cells[3].size()) throw std::invalid_argument("trailing");
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw ParseError("bad number in comparison CSV", offset);
        }
        offset += line.size() + 1;
    }
    return rows;
}

std::string format_comparison_json(const Comparison& comparison) {
    json methods = json::object();
    for (const auto& r : comparison.rows) {
        methods[r.method] = {{"mean_acc", r.mean_acc}, {"std_acc", r.std_acc}, {"seeds", r.seeds}};
    }
    json j{{"summary", methods}};
    j["delta_vs_l2sp_larger_fraction"] =
        comparison.delta_vs_l2sp_larger_fraction ? json(*comparison.delta_vs_l2sp_larger_fraction) : json(nullptr);
    return j.dump(2) + "\n";
}

std::size_t iterations_to_fraction(const std::vector<std::vector<MetricsRow>>& logs, double fraction) {
    if (logs.empty() || logs.front().empty()) throw ContractError("no learning curves given");
    const std::size_t n = logs.front().size();
    std::vector<double> curve(n, 0.0);
    for (const auto& log : logs) {
        if (log.size() != n) throw ContractError("learning curves have different lengths");
        for (std::size_t i = 0; i < n; ++i) {
            if (log[i].iteration != logs.front()[i].iteration) {
                throw ContractError("learning curves are logged at different iterations");
            }
            curve[i] += log[i].test_acc / static_cast<double>(logs.size());
        }
    }
    const double target = fraction * curve.back();
    for (std::size_t i = 0; i < n; ++i) {
        if (curve[i] >= target) return logs.front()[i].iteration;
    }
    return logs.front().back().iteration;
}

double pixel_linear_baseline(const Dataset& train_set, const Dataset& test_set, std::size_t epochs, double lr) {
    const std::size_t k = train_set.num_classes();
    const std::size_t d = train_set[0].image.pixels.size();
    const auto mean = train_set.channel_mean();
    const std::size_t area = train_set.height() * train_set.width();
    auto features = [&](const Image& img) {
        std::vector<double> f(img.pixels);
        for (std::size_t i = 0; i < d; ++i) f[i] -= mean[i / area];
        return f;
    };
    std::vector<std::vector<double>> x;
    for (const auto& s : train_set.samples()) x.push_back(features(s.image));
    std::vector<double> w(k * d, 0.0), b(k, 0.0);
    const double n = static_cast<double>(train_set.size());
    std::vector<double> logits(k);
    auto score = [&](const std::vector<double>& f) {
        for (std::size_t c = 0; c < k; ++c) {
            logits[c] = b[c] + std::inner_product(f.begin(), f.end(), w.begin() + c * d, 0.0);
        }
    };
    for (std::size_t e = 0; e < epochs; ++e) {
        std::vector<double> gw(k * d, 0.0), gb(k, 0.0);
        for (std::size_t i = 0; i < train_set.size(); ++i) {
            score(x[i]);
            const auto p = softmax(logits);
            for (std::size_t c = 0; c < k; ++c) {
                const double g = (p[c] - (train_set[i].label == c ? 1.0 : 0.0)) / n;
                gb[c] += g;
                for (std::size_t j = 0; j < d; ++j) gw[c * d + j] += g * x[i][j];
            }
        }
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * gw[j];
        for (std::size_t c = 0; c < k; ++c) b[c] -= lr * gb[c];
    }
    std::size_t correct = 0;
    for (const auto& s : test_set.samples()) {
        score(features(s.image));
        correct += argmax(logits) == s.label;
    }
    return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

StudyResult run_study(const StudyConfig& sc) {
    StudyResult result;
    const fs::path out = sc.out_dir;
    fs::create_directories(out / "data");

    auto [source_train, target_train] = make_synthetic_transfer_pair(sc.data);
    SyntheticSpec test_spec = sc.data;
    test_spec.sample_stream = sc.data.sample_stream + 1;
    test_spec.per_class = sc.test_per_class;
    test_spec.target_per_class = sc.test_per_class;
    auto [source_test, target_test] = make_synthetic_transfer_pair(test_spec);
    save_dataset(source_train, out / "data/source_train.dimg");
    save_dataset(target_train, out / "data/target_train.dimg");
    const Dataset target_test_split(target_test.samples(), target_test.num_classes(), Split::Test);
    save_dataset(target_test_split, out / "data/target_test.dimg");

    result.pixel_linear_acc = pixel_linear_baseline(target_train, target_test);

    const fs::path ckpt = out / "source/source.ckpt";
    AugmentSpec src_aug;
    src_aug.crop = sc.crop;
    src_aug.mean = source_train.channel_mean();
    if (fs::exists(ckpt) && fs::exists(out / "source/source.json")) {
        result.source_test_acc = json::parse(read_text(out / "source/source.json")).at("test_acc").get<double>();
    } else {
        TrainConfig pc;
        pc.regularizer = {RegularizerKind::L2, sc.pretrain_weight_decay, 0.0};
        pc.schedule = {ScheduleKind::StepLR, sc.pretrain_lr, 0.1, sc.pretrain_iterations * 2 / 3};
        pc.iterations = sc.pretrain_iterations;
        pc.log_every = std::max<std::size_t>(1, sc.pretrain_iterations / 10);
        pc.augment = src_aug;
        pc.seed = sc.pretrain_seed;
        const auto spec = reference_model_spec(sc.data.channels, sc.crop, sc.data.source_classes);
        const auto pre = train(build_model(spec, sc.pretrain_seed), source_train, &source_test, pc);
        write_metrics_csv(pre.log, out / "source/metrics.csv");
        save_checkpoint(pre.model, ckpt);
        result.source_test_acc = pre.log.back().test_acc;
        write_text(out / "source/source.json", json{{"test_acc", result.source_test_acc}}.dump(2) + "\n");
    }

    std::vector<fs::path> run_dirs;
    for (RegularizerKind kind : sc.methods) {
        ExperimentConfig c;
        c.source_checkpoint = ckpt;
        c.train_data = out / "data/target_train.dimg";
        c.test_data = out / "data/target_test.dimg";
        c.attention_cache = out / "attention/attention.datt";
        c.regularizer = {kind, sc.alpha_candidates.front(), sc.beta, false};
        if (uses_alpha(kind)) c.alpha_candidates = sc.alpha_candidates;
        c.cv_folds = sc.cv_folds;
        c.schedule = {ScheduleKind::StepLR, sc.base_lr, 0.1, sc.iterations * 2 / 3};
        c.iterations = sc.iterations;
        c.log_every = sc.log_every;
        c.augment.crop = sc.crop;
        c.seeds = sc.seeds;
        c.out_dir = out / "runs" / to_string(kind);
        fs::create_directories(out / "attention");
        result.summaries.push_back(run_experiment(c));
        std::vector<std::vector<MetricsRow>> logs;
        for (std::uint64_t seed : sc.seeds) {
            logs.push_back(read_metrics_csv(c.out_dir / "metrics" / (run_name(seed) + ".csv")));
        }
        result.logs.push_back(std::move(logs));
        run_dirs.push_back(c.out_dir);
    }

    result.comparison = compare_methods(run_dirs);
    write_text(out / "comparison.csv", format_comparison_csv(result.comparison));
    write_text(out / "comparison.json", format_comparison_json(result.comparison));
    json study{{"source_test_acc", result.source_test_acc}, {"pixel_linear_acc", result.pixel_linear_acc}};
    json conv = json::object();
    for (std::size_t m = 0; m < sc.methods.size(); ++m) {
        conv[to_string(sc.methods[m])] = iterations_to_fraction(result.logs[m], 0.9);
    }
    study["iterations_to_90pct"] = conv;
    write_text(out / "study.json", study.dump(2) + "\n");
    return result;
}

}  // namespace delta
