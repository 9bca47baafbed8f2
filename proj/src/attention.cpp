#include "delta/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "delta/binary_io.hpp"
#include "delta/errors.hpp"
#include "delta/ops.hpp"

namespace delta {

namespace {

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    const std::size_t width = x.numel() / x.dim(0);
    std::vector<double> out;
    out.reserve(rows.size() * width);
    for (auto r : rows) {
        const auto src = x.data().subspan(r * width, width);
        out.insert(out.end(), src.begin(), src.end());
    }
    return Tensor::from_data({rows.size(), width}, std::move(out));
}

// Inputs of the head layer for every sample, with the extractor frozen.
Tensor head_inputs(const ConvNetModel& model, const std::vector<Image>& views) {
    NoGradGuard no_grad;
    const std::size_t head = model.head_layer();
    constexpr std::size_t kChunk = 128;
    std::vector<double> data;
    std::size_t width = 0;
    for (std::size_t begin = 0; begin < views.size(); begin += kChunk) {
        const std::size_t end = std::min(views.size(), begin + kChunk);
        const Tensor x = stack_images(std::span<const Image>(views).subspan(begin, end - begin));
        const Tensor f = flatten(model.layer_inputs(x)[head]);
        width = f.dim(1);
        data.insert(data.end(), f.data().begin(), f.data().end());
    }
    return Tensor::from_data({views.size(), width}, std::move(data));
}

std::size_t tap_filters(const ConvNetModel& model, std::size_t tap) {
    const auto& layers = model.spec().layers;
    if (tap >= layers.size() || layers[tap].kind != LayerKind::Conv) {
        throw ConfigError("attention tap " + std::to_string(tap) + " is not a conv layer");
    }
    return layers[tap].out_channels;
}

// Attention rows for one batch of prepared views, laid out like AttentionTable rows.
std::vector<double> scan_batch(const ConvNetModel& fe_model, const Tensor& images, std::span<const Label> labels,
                               const std::vector<std::size_t>& taps, std::size_t row_width) {
    NoGradGuard no_grad;
    const std::size_t batch = images.dim(0);
    const auto inputs = fe_model.layer_inputs(images);
    const auto baseline = per_sample_cross_entropy(fe_model.forward(images), labels);
    std::vector<double> rows(batch * row_width);
    std::size_t offset = 0;
    for (auto tap : taps) {
        const std::size_t n = tap_filters(fe_model, tap);
        std::vector<double> gaps(batch * n);
        for (std::size_t j = 0; j < n; ++j) {
            const FilterAblation ablation{tap, j};
            const auto loss = per_sample_cross_entropy(fe_model.forward_from(inputs[tap], tap, &ablation), labels);
            for (std::size_t b = 0; b < batch; ++b) gaps[b * n + j] = loss[b] - baseline[b];
        }
        for (std::size_t b = 0; b < batch; ++b) {
            const auto w = attention_from_gaps(std::span<const double>(gaps).subspan(b * n, n));
            std::copy(w.begin(), w.end(), rows.begin() + static_cast<std::ptrdiff_t>(b * row_width + offset));
        }
        offset += n;
    }
    return rows;
}

}  // namespace

ConvNetModel train_fe_head(const ConvNetModel& model, const Dataset& data, const FeHeadOptions& options,
                           std::vector<double>* epoch_losses) {
    if (!model.has_source()) throw ContractError("train_fe_head needs a model with a replaced head");
    if (data.empty()) throw ConfigError("train_fe_head: empty dataset");
    ConvNetModel out = model.clone();
    if (epoch_losses) epoch_losses->clear();
    if (options.epochs == 0) return out;

    const std::size_t head = out.head_layer();
    const Tensor features = head_inputs(out, eval_views(data, options.view));
    std::vector<Label> labels;
    for (const auto& s : data.samples()) labels.push_back(s.label);

    std::vector<Tensor*> head_params;
    for (auto& p : out.parameters()) {
        if (out.is_head(p.name)) head_params.push_back(&p.value);
    }
    const std::size_t n = data.size();
    const std::size_t batch = options.batch_size == 0 ? n : std::min(options.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(options.seed);

    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        if (batch < n) std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t begin = 0; begin + batch <= n; begin += batch) {
            const std::span<const std::size_t> idx(order.data() + begin, batch);
            std::vector<Label> y;
            for (auto i : idx) y.push_back(labels[i]);
            for (auto* p : head_params) p->zero_grad();
            const Tensor loss = softmax_cross_entropy(out.forward_from(gather_rows(features, idx), head), y);
            if (!std::isfinite(loss.item())) throw NumericError("train_fe_head: non-finite loss");
            loss.backward();
            for (auto* p : head_params) {
                auto w = p->data();
                const auto g = p->grad();
                for (std::size_t k = 0; k < w.size(); ++k) w[k] -= options.lr * g[k];
            }
        }
        if (epoch_losses) {
            NoGradGuard no_grad;
            epoch_losses->push_back(softmax_cross_entropy(out.forward_from(features, head), labels).item());
        }
    }
    for (auto* p : head_params) p->zero_grad();
    return out;
}

std::vector<double> ablate_filter_loss(const ConvNetModel& fe_model, const Tensor& images,
                                       std::span<const Label> labels, std::size_t tap, std::size_t filter) {
    NoGradGuard no_grad;
    const std::size_t n = tap_filters(fe_model, tap);
    if (filter >= n) {
        throw IndexError("filter " + std::to_string(filter) + " out of range for layer " + std::to_string(tap) +
                         " with " + std::to_string(n) + " filters");
    }
    const auto inputs = fe_model.layer_inputs(images);
    const FilterAblation ablation{tap, filter};
    return per_sample_cross_entropy(fe_model.forward_from(inputs[tap], tap, &ablation), labels);
}

double ablate_filter_loss(const ConvNetModel& fe_model, const Image& view, Label label, std::size_t tap,
                          std::size_t filter) {
    const Label labels[1] = {label};
    return ablate_filter_loss(fe_model, stack_images(std::span<const Image>(&view, 1)), labels, tap, filter)[0];
}

std::vector<double> attention_from_gaps(std::span<const double> gaps) { return softmax(gaps); }

std::vector<double> attention_weights(const ConvNetModel& fe_model, const Image& view, Label label, std::size_t tap) {
    NoGradGuard no_grad;
    const Label labels[1] = {label};
    const Tensor x = stack_images(std::span<const Image>(&view, 1));
    const double baseline = per_sample_cross_entropy(fe_model.forward(x), labels)[0];
    const std::size_t n = tap_filters(fe_model, tap);
    std::vector<double> gaps(n);
    for (std::size_t j = 0; j < n; ++j) gaps[j] = ablate_filter_loss(fe_model, x, labels, tap, j)[0] - baseline;
    return attention_from_gaps(gaps);
}

std::uint64_t source_fingerprint(const ConvNetModel& model) {
    Fnv1a h;
    for (const auto& p : model.source()) {
        h.update(p.name.data(), p.name.size());
        for (auto d : p.value.shape()) h.update_value(static_cast<std::uint64_t>(d));
        h.update(p.value.data().data(), p.value.numel() * sizeof(double));
    }
    return h.digest();
}

AttentionTable build_attention_table(const ConvNetModel& fe_model, const Dataset& data,
                                     const std::vector<std::size_t>& taps, const AttentionOptions& options) {
    if (taps.empty()) throw ConfigError("build_attention_table: no taps");
    std::vector<std::size_t> filters;
    for (auto t : taps) filters.push_back(tap_filters(fe_model, t));
    const std::size_t width = std::accumulate(filters.begin(), filters.end(), std::size_t{0});

    const AttentionTable::Metadata meta{data.hash(), source_fingerprint(fe_model), fe_model.fingerprint()};
    std::vector<std::uint64_t> ids;
    for (const auto& s : data.samples()) ids.push_back(s.id);

    if (options.cache && std::filesystem::exists(*options.cache)) {
        try {
            auto cached = load_attention(*options.cache);
            if (cached.metadata() == meta && cached.taps() == taps && cached.sample_ids() == ids) return cached;
        } catch (const ParseError&) {
        } catch (const ValidationError&) {
        }
    }

    const auto views = eval_views(data, options.view);
    const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
    const std::size_t n_chunks = (data.size() + chunk - 1) / chunk;
    std::vector<double> weights(data.size() * width);

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t c = next++; c < n_chunks; c = next++) {
            try {
                const std::size_t begin = c * chunk, end = std::min(data.size(), begin + chunk);
                std::vector<Label> labels;
                for (std::size_t i = begin; i < end; ++i) labels.push_back(data[i].label);
                const Tensor x = stack_images(std::span<const Image>(views).subspan(begin, end - begin));
                const auto rows = scan_batch(fe_model, x, labels, taps, width);
                std::copy(rows.begin(), rows.end(), weights.begin() + static_cast<std::ptrdiff_t>(begin * width));
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(1, n_chunks));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);

    AttentionTable table(meta, taps, filters, std::move(ids), std::move(weights));
    if (options.cache) save_attention(table, *options.cache);
    return table;
}

}  // namespace delta
