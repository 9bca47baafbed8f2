#include "delta/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "delta/binary_io.hpp"
#include "delta/errors.hpp"

namespace delta {

namespace {

constexpr const char* kMetricsHeader = "iteration,epoch,lr,train_loss,train_acc,test_acc";

std::string state_dump(const ConvNetModel& model, std::size_t iteration, std::size_t epoch, double lr,
                       std::span<const std::uint64_t> ids, const std::string& cause) {
    std::ostringstream out;
    out << "non-finite training state at iteration " << iteration << " (epoch " << epoch << ", lr "
        << format_real(lr) << "): " << cause << "\n  batch ids:";
    for (auto id : ids) out << ' ' << id;
    for (const auto& p : model.parameters()) {
        double sq = 0.0;
        bool finite = true;
        for (double v : p.value.data()) {
            finite &= std::isfinite(v);
            sq += v * v;
        }
        out << "\n  " << p.name << " norm " << format_real(std::sqrt(sq)) << (finite ? "" : " (non-finite values)");
    }
    return out.str();
}

std::size_t count_correct(const Tensor& logits, std::span<const Label> labels) {
    const std::size_t k = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        correct += argmax(logits.data().subspan(b * k, k)) == labels[b];
    }
    return correct;
}

}  // namespace

OptimizerState make_optimizer(const ConvNetModel& model, double momentum, double lr, std::vector<bool> frozen) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    OptimizerState state;
    state.momentum = momentum;
    state.lr = lr;
    if (frozen.empty()) frozen.assign(model.parameters().size(), false);
    if (frozen.size() != model.parameters().size()) throw ConfigError("freeze mask does not match parameter count");
    state.frozen = std::move(frozen);
    for (const auto& p : model.parameters()) state.velocity.emplace_back(p.value.numel(), 0.0);
    return state;
}

void sgd_momentum_step(OptimizerState& state, ConvNetModel& model) {
    auto& params = model.parameters();
    if (state.velocity.size() != params.size()) throw ContractError("optimizer state does not match the model");
    if (!(state.lr > 0.0)) throw ContractError("learning rate must be positive");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.frozen[i]) continue;
        auto& t = params[i].value;
        if (!t.has_grad()) throw ContractError("parameter " + params[i].name + " has no gradient");
        auto& v = state.velocity[i];
        auto w = t.data();
        const auto g = t.grad();
        for (std::size_t k = 0; k < w.size(); ++k) {
            v[k] = state.momentum * v[k] + g[k];
            w[k] -= state.lr * v[k];
        }
    }
    ++state.iteration;
}

void validate(const ScheduleSpec& spec) {
    if (!(spec.base_lr > 0.0) || !std::isfinite(spec.base_lr)) throw ConfigError("base_lr must be positive");
    if (!(spec.factor > 0.0 && spec.factor <= 1.0)) throw ConfigError("schedule factor must be in (0, 1]");
    if (spec.kind == ScheduleKind::StepLR && spec.step == 0) throw ConfigError("StepLR step must be positive");
}

double schedule_lr(const ScheduleSpec& spec, std::size_t iteration, std::size_t epoch) {
    validate(spec);
    const std::size_t power = spec.kind == ScheduleKind::StepLR ? iteration / spec.step : epoch;
    // Factors like 0.1 are applied as division by 10 so that one decay gives exactly base / 10.
    const double inverse = 1.0 / spec.factor;
    const bool divide = inverse == std::round(inverse);
    double lr = spec.base_lr;
    for (std::size_t i = 0; i < power; ++i) lr = divide ? lr / inverse : lr * spec.factor;
    return lr;
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::StepLR ? "step" : "exponential"; }

ScheduleKind schedule_kind_from_string(const std::string& name) {
    std::string key;
    for (char c : name) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (key == "step" || key == "steplr") return ScheduleKind::StepLR;
    if (key == "exponential" || key == "exponentiallr" || key == "exp") return ScheduleKind::ExponentialLR;
    throw ConfigError("unknown schedule '" + name + "'");
}

ConvNetModel spar_init(const ConvNetModel& source, std::size_t num_classes, std::uint64_t seed) {
    return replace_head(source, num_classes, seed);
}

TrainResult train(ConvNetModel model, const Dataset& train_set, const Dataset* test_set, const TrainConfig& config,
                  const AttentionTable* attention) {
    validate(config.regularizer);
    validate(config.schedule);
    if (train_set.empty()) throw ConfigError("training set is empty");
    if (config.batch_size == 0) throw ConfigError("batch size must be positive");

    std::vector<bool> frozen(model.parameters().size(), false);
    if (config.regularizer.kind == RegularizerKind::L2FE) {
        if (!model.has_source()) throw ContractError("L2FE needs a transferred model");
        for (std::size_t i = 0; i < frozen.size(); ++i) frozen[i] = !model.is_head(model.parameters()[i].name);
    }
    OptimizerState opt = make_optimizer(model, config.momentum, config.schedule.base_lr, frozen);

    const std::size_t n = train_set.size();
    const std::size_t batch = std::min(config.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{config.seed, std::uint64_t{0x747261696eULL}};
    std::mt19937_64 rng(seq);
    std::size_t cursor = n;

    TrainResult result;
    double loss_sum = 0.0, acc_sum = 0.0;
    std::size_t interval = 0;
    std::vector<Image> views(batch);
    std::vector<Label> labels(batch);
    std::vector<std::uint64_t> ids(batch);

    for (std::size_t it = 0; it < config.iterations; ++it) {
        const std::size_t epoch = it * batch / n;
        opt.lr = schedule_lr(config.schedule, it, epoch);
        if (cursor + batch > n) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        for (std::size_t b = 0; b < batch; ++b) {
            const Sample& s = train_set[order[cursor + b]];
            views[b] = augment(s.image, config.augment, rng);
            labels[b] = s.label;
            ids[b] = s.id;
        }
        cursor += batch;

        for (auto& p : model.parameters()) p.value.zero_grad();
        ObjectiveTerms terms;
        try {
            terms = evaluate_objective(model, stack_images(views), labels, ids, config.regularizer, attention);
        } catch (const NumericError& e) {
            throw NumericError(state_dump(model, it, epoch, opt.lr, ids, e.what()));
        }
        const double loss = terms.total.item();
        if (!std::isfinite(loss)) throw NumericError(state_dump(model, it, epoch, opt.lr, ids, "loss is not finite"));
        terms.total.backward();
        sgd_momentum_step(opt, model);

        loss_sum += loss;
        acc_sum += static_cast<double>(count_correct(terms.logits, labels)) / static_cast<double>(batch);
        ++interval;
        const bool last = it + 1 == config.iterations;
        if ((config.log_every > 0 && (it + 1) % config.log_every == 0) || last) {
            MetricsRow row;
            row.iteration = it + 1;
            row.epoch = epoch;
            row.lr = opt.lr;
            row.train_loss = loss_sum / static_cast<double>(interval);
            row.train_acc = acc_sum / static_cast<double>(interval);
            row.test_acc = test_set ? evaluate(model, *test_set, config.augment, config.ten_crop_eval)
                                    : std::numeric_limits<double>::quiet_NaN();
            result.log.push_back(row);
            loss_sum = acc_sum = 0.0;
            interval = 0;
        }
    }
    for (auto& p : model.parameters()) p.value.zero_grad();
    result.model = std::move(model);
    return result;
}

TrainResult fine_tune(const ConvNetModel& source, const Dataset& train_set, const Dataset* test_set,
                      const TrainConfig& config, const AttentionTable* attention) {
    std::seed_seq seq{config.seed, std::uint64_t{0x68656164ULL}};
    const std::uint64_t head_seed = std::mt19937_64(seq)();
    return train(spar_init(source, train_set.num_classes(), head_seed), train_set, test_set, config, attention);
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

double evaluate(const ConvNetModel& model, const Dataset& data, const AugmentSpec& view, bool ten_crop) {
    if (data.empty()) throw ConfigError("evaluate: empty dataset");
    NoGradGuard no_grad;
    std::size_t correct = 0;
    if (!ten_crop) {
        constexpr std::size_t kChunk = 128;
        for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
            const std::size_t end = std::min(data.size(), begin + kChunk);
            std::vector<Image> views;
            std::vector<Label> labels;
            for (std::size_t i = begin; i < end; ++i) {
                views.push_back(eval_view(data[i].image, view));
                labels.push_back(data[i].label);
            }
            correct += count_correct(model.forward(stack_images(views)), labels);
        }
    } else {
        for (const auto& s : data.samples()) {
            const auto crops = ten_crop_views(s.image, view);
            const auto probs = softmax_rows(model.forward(stack_images(crops)));
            const std::size_t k = probs.size() / crops.size();
            std::vector<double> mean(k, 0.0);
            for (std::size_t c = 0; c < crops.size(); ++c)
                for (std::size_t j = 0; j < k; ++j) mean[j] += probs[c * k + j] / static_cast<double>(crops.size());
            correct += argmax(mean) == s.label;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<std::vector<std::size_t>> stratified_folds(const Dataset& data, std::size_t folds, std::uint64_t seed) {
    if (folds < 2) throw ConfigError("need at least 2 folds");
    std::vector<std::vector<std::size_t>> by_class(data.num_classes());
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].label].push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < folds) {
            throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                              " samples; " + std::to_string(folds) + " folds need at least that many per class");
        }
    }
    std::seed_seq seq{seed, std::uint64_t{0x666f6c64ULL}};
    std::mt19937_64 rng(seq);
    std::vector<std::vector<std::size_t>> out(folds);
    std::size_t next = 0;
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        for (auto i : members) out[next++ % folds].push_back(i);
    }
    for (auto& f : out) std::sort(f.begin(), f.end());
    return out;
}

CrossValidation cross_validate_alpha(const ConvNetModel& source, const Dataset& data, std::vector<double> alphas,
                                     const TrainConfig& config, const AttentionTable* attention, std::size_t folds) {
    if (alphas.empty()) throw ConfigError("no alpha candidates");
    std::sort(alphas.begin(), alphas.end());
    alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
    CrossValidation cv;
    cv.alphas = alphas;
    if (alphas.size() == 1) {
        cv.best_alpha = alphas.front();
        return cv;
    }
    const auto split = stratified_folds(data, folds, config.seed);
    double best = -1.0;
    for (double alpha : alphas) {
        TrainConfig cfg = config;
        cfg.regularizer.alpha = alpha;
        std::vector<double> accs;
        for (std::size_t f = 0; f < folds; ++f) {
            std::vector<std::size_t> train_idx;
            for (std::size_t g = 0; g < folds; ++g)
                if (g != f) train_idx.insert(train_idx.end(), split[g].begin(), split[g].end());
            std::sort(train_idx.begin(), train_idx.end());
            cfg.seed = config.seed * 1000003ULL + f;
            const auto trained = fine_tune(source, data.subset(train_idx), nullptr, cfg, attention);
            accs.push_back(evaluate(trained.model, data.subset(split[f]), cfg.augment, cfg.ten_crop_eval));
        }
        const double mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(folds);
        cv.fold_accuracy.push_back(accs);
        cv.mean_accuracy.push_back(mean);
        if (mean > best) {
            best = mean;
            cv.best_alpha = alpha;
        }
    }
    return cv;
}

std::string format_real(double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const auto& r : rows) {
        out += std::to_string(r.iteration) + "," + std::to_string(r.epoch) + "," + format_real(r.lr) + "," +
               format_real(r.train_loss) + "," + format_real(r.train_acc) + "," + format_real(r.test_acc) + "\n";
    }
    return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
    std::vector<MetricsRow> rows;
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        if (header) {
            if (line != kMetricsHeader) throw ParseError("metrics CSV header mismatch", pos);
            header = false;
        } else if (!line.empty()) {
            std::vector<std::string> fields;
            std::stringstream ss(line);
            for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
            if (fields.size() != 6) throw ParseError("metrics CSV row needs 6 fields", pos);
            try {
                MetricsRow r;
                r.iteration = std::stoull(fields[0]);
                r.epoch = std::stoull(fields[1]);
                r.lr = std::stod(fields[2]);
                r.train_loss = std::stod(fields[3]);
                r.train_acc = std::stod(fields[4]);
                r.test_acc = std::stod(fields[5]);
                rows.push_back(r);
            } catch (const std::logic_error&) {
                throw ParseError("malformed number in metrics CSV", pos);
            }
        }
        pos = eol + 1;
    }
    if (header) throw ParseError("metrics CSV is empty", 0);
    return rows;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
    const std::string text = format_metrics_csv(rows);
    write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                         text.size()));
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_metrics_csv(std::string(bytes.begin(), bytes.end()));
}

}  // namespace delta
