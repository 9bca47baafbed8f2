#include "delta/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "delta/binary_io.hpp"
#include "delta/errors.hpp"

namespace delta {

Dataset::Dataset(std::vector<Sample> samples, std::size_t num_classes, Split split)
    : samples_(std::move(samples)), num_classes_(num_classes), split_(split) {
    if (num_classes_ < 2) throw ValidationError("dataset needs at least 2 classes");
    for (const auto& s : samples_) {
        if (s.label >= num_classes_) {
            throw ValidationError("label " + std::to_string(s.label) + " out of range for " +
                                  std::to_string(num_classes_) + " classes");
        }
        const auto& im = s.image;
        if (im.pixels.size() != im.channels * im.height * im.width || im.pixels.empty()) {
            throw ValidationError("image pixel count does not match its extents");
        }
        const auto& first = samples_.front().image;
        if (im.channels != first.channels || im.height != first.height || im.width != first.width) {
            throw ValidationError("images in a dataset must share C, H, W");
        }
    }
    hash_ = fnv1a(serialize_dataset(*this));
}

std::size_t Dataset::channels() const { return samples_.empty() ? 0 : samples_.front().image.channels; }
std::size_t Dataset::height() const { return samples_.empty() ? 0 : samples_.front().image.height; }
std::size_t Dataset::width() const { return samples_.empty() ? 0 : samples_.front().image.width; }

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes_, 0);
    for (const auto& s : samples_) ++counts[s.label];
    return counts;
}

std::vector<double> Dataset::channel_mean() const {
    std::vector<double> mean(channels(), 0.0);
    if (samples_.empty()) return mean;
    const std::size_t area = height() * width();
    for (const auto& s : samples_) {
        for (std::size_t c = 0; c < mean.size(); ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < area; ++k) acc += s.image.pixels[c * area + k];
            mean[c] += acc;
        }
    }
    for (auto& m : mean) m /= static_cast<double>(area * samples_.size());
    return mean;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    std::vector<Sample> picked;
    picked.reserve(indices.size());
    for (auto i : indices) {
        if (i >= samples_.size()) throw IndexError("subset index " + std::to_string(i) + " out of range");
        picked.push_back(samples_[i]);
    }
    return Dataset(std::move(picked), num_classes_, split_);
}

// --- DIMG ------------------------------------------------------------------

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset) {
    ByteWriter w;
    w.put_magic("DIMG");
    w.put<std::uint32_t>(kDatasetVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.num_classes()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.size()));
    for (const auto& s : dataset.samples()) {
        w.put<std::uint32_t>(s.label);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.image.channels));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.image.height));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.image.width));
        w.put_doubles(s.image.pixels);
    }
    return w.release();
}

namespace {

struct RawDataset {
    std::uint32_t num_classes;
    std::vector<Sample> samples;
};

RawDataset parse_raw(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("DIMG");
    const auto version_at = r.offset();
    if (r.get<std::uint32_t>("version") != kDatasetVersion) throw ParseError("unsupported DIMG version", version_at);
    RawDataset raw;
    raw.num_classes = r.get<std::uint32_t>("class count");
    const auto count = r.get<std::uint32_t>("sample count");
    for (std::uint32_t i = 0; i < count; ++i) {
        Sample s;
        s.id = i;
        s.label = r.get<std::uint32_t>("label");
        const auto dims_at = r.offset();
        s.image.channels = r.get<std::uint32_t>("channels");
        s.image.height = r.get<std::uint32_t>("height");
        s.image.width = r.get<std::uint32_t>("width");
        if (s.image.channels == 0 || s.image.height == 0 || s.image.width == 0) {
            throw ParseError("zero image extent", dims_at);
        }
        s.image.pixels = r.get_doubles(s.image.channels * s.image.height * s.image.width, "pixels");
        raw.samples.push_back(std::move(s));
    }
    r.expect_end();
    return raw;
}

}  // namespace

Dataset parse_dataset(std::span<const std::uint8_t> bytes, Split split) {
    auto raw = parse_raw(bytes);
    return Dataset(std::move(raw.samples), raw.num_classes, split);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path, Split split) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) return parse_dataset(read_file_bytes(path), split);

    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    std::vector<Sample> samples;
    for (std::size_t label = 0; label < class_dirs.size(); ++label) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
            if (entry.is_regular_file() && entry.path().extension() == ".dimg") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            auto raw = parse_raw(read_file_bytes(file));
            if (raw.samples.size() != 1) {
                throw ValidationError(file.string() + ": per-sample files must hold exactly one sample");
            }
            if (raw.samples[0].label != label || raw.num_classes != class_dirs.size()) {
                throw ValidationError(file.string() + ": stored label " + std::to_string(raw.samples[0].label) +
                                      "/" + std::to_string(raw.num_classes) + " disagrees with class directory " +
                                      std::to_string(label) + "/" + std::to_string(class_dirs.size()));
            }
            raw.samples[0].id = samples.size();
            samples.push_back(std::move(raw.samples[0]));
        }
    }
    return Dataset(std::move(samples), class_dirs.size(), split);
}

// --- synthetic transfer task ----------------------------------------------

namespace {

struct Primitive {
    double theta;
    double frequency;  // cycles per pixel
    std::vector<double> color;
};

std::vector<Primitive> primitive_bank(std::size_t channels, std::mt19937_64& rng) {
    std::vector<Primitive> bank;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t f = 0; f < 2; ++f) {
        for (std::size_t o = 0; o < 6; ++o) {
            Primitive p;
            p.theta = std::numbers::pi * static_cast<double>(o) / 6.0;
            p.frequency = f == 0 ? 0.18 : 0.32;
            for (std::size_t c = 0; c < channels; ++c) p.color.push_back(0.4 + 0.6 * unit(rng));
            bank.push_back(std::move(p));
        }
    }
    return bank;
}

using ClassDef = std::pair<std::size_t, std::size_t>;

std::vector<ClassDef> draw_class_defs(std::size_t count, std::size_t bank_size, std::set<ClassDef>& used,
                                      std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, bank_size - 1);
    std::vector<ClassDef> defs;
    while (defs.size() < count) {
        auto a = pick(rng), b = pick(rng);
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        if (!used.insert({a, b}).second) continue;
        defs.push_back({a, b});
    }
    return defs;
}

void add_gabor(Image& im, const Primitive& p, double cy, double cx, double amplitude, double phase) {
    constexpr double sigma = 2.6;
    const double ct = std::cos(p.theta), st = std::sin(p.theta);
    for (std::size_t y = 0; y < im.height; ++y) {
        for (std::size_t x = 0; x < im.width; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double envelope = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            const double carrier = std::cos(2 * std::numbers::pi * p.frequency * (dx * ct + dy * st) + phase);
            const double v = amplitude * envelope * carrier;
            for (std::size_t c = 0; c < im.channels; ++c) im.at(c, y, x) += v * p.color[c];
        }
    }
}

Image render_sample(const ClassDef& def, const std::vector<Primitive>& bank, const SyntheticSpec& spec,
                    std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec.noise);
    std::uniform_int_distribution<std::size_t> any_primitive(0, bank.size() - 1);
    Image im{spec.channels, spec.size, spec.size, std::vector<double>(spec.channels * spec.size * spec.size)};

    // Shared background family: gray level plus a faint low-frequency gradient.
    const double gx = 0.1 * (unit(rng) - 0.5), gy = 0.1 * (unit(rng) - 0.5);
    const double scale = static_cast<double>(spec.size);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        const double base = 0.45 + 0.1 * unit(rng);
        for (std::size_t y = 0; y < spec.size; ++y)
            for (std::size_t x = 0; x < spec.size; ++x)
                im.at(c, y, x) = base + gx * (static_cast<double>(x) / scale) + gy * (static_cast<double>(y) / scale);
    }
    const double margin = 3.0, span = scale - 1.0 - 2 * margin;
    auto place = [&](const Primitive& p, double amplitude) {
        add_gabor(im, p, margin + span * unit(rng), margin + span * unit(rng), amplitude,
                  2 * std::numbers::pi * unit(rng));
    };
    place(bank[def.first], 0.28 * (0.8 + 0.4 * unit(rng)));
    place(bank[def.second], 0.28 * (0.8 + 0.4 * unit(rng)));
    place(bank[any_primitive(rng)], 0.12);
    for (auto& v : im.pixels) v = std::clamp(v + noise(rng), 0.0, 1.0);
    return im;
}

Dataset render_split(const std::vector<ClassDef>& defs, const std::vector<Primitive>& bank, const SyntheticSpec& spec,
                     std::size_t per_class, std::uint64_t stream_tag) {
    std::seed_seq seq{spec.seed, spec.sample_stream, stream_tag};
    std::mt19937_64 rng(seq);
    std::vector<Sample> samples;
    for (std::size_t c = 0; c < defs.size(); ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            Sample s;
            s.image = render_sample(defs[c], bank, spec, rng);
            s.label = static_cast<Label>(c);
            s.id = samples.size();
            samples.push_back(std::move(s));
        }
    }
    return Dataset(std::move(samples), defs.size(), Split::Train);
}

}  // namespace

std::pair<Dataset, Dataset> make_synthetic_transfer_pair(const SyntheticSpec& spec) {
    if (spec.source_classes < 2 || spec.target_classes < 2) throw ConfigError("synthetic task needs >= 2 classes");
    if (spec.size < 8 || spec.channels == 0 || spec.per_class == 0) throw ConfigError("synthetic task too small");
    std::mt19937_64 rng(spec.seed);
    const auto bank = primitive_bank(spec.channels, rng);
    if (spec.source_classes + spec.target_classes > bank.size() * (bank.size() - 1) / 2) {
        throw ConfigError("synthetic task: not enough distinct primitive pairs");
    }
    std::set<ClassDef> used;
    const auto source_defs = draw_class_defs(spec.source_classes, bank.size(), used, rng);
    const auto target_defs = draw_class_defs(spec.target_classes, bank.size(), used, rng);
    const std::size_t target_n = spec.target_per_class ? spec.target_per_class : spec.per_class;
    return {render_split(source_defs, bank, spec, spec.per_class, 0),
            render_split(target_defs, bank, spec, target_n, 1)};
}

// --- augmentation ------------------------------------------------------------

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw ConfigError("resize target must be non-empty");
    Image out{image.channels, height, width, std::vector<double>(image.channels * height * width)};
    const double sy = static_cast<double>(image.height) / static_cast<double>(height);
    const double sx = static_cast<double>(image.width) / static_cast<double>(width);
    auto source_coord = [](std::size_t o, double s, std::size_t extent) {
        const double v = (static_cast<double>(o) + 0.5) * s - 0.5;
        return std::clamp(v, 0.0, static_cast<double>(extent - 1));
    };
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = source_coord(y, sy, image.height);
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = source_coord(x, sx, image.width);
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < image.channels; ++c) {
                const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
                const double bottom = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bottom * wy;
            }
        }
    }
    return out;
}

Image resize_shorter_edge(const Image& image, std::size_t shorter) {
    if (image.height <= image.width) {
        const auto w = static_cast<std::size_t>(
            std::lround(static_cast<double>(image.width) * static_cast<double>(shorter) / static_cast<double>(image.height)));
        return resize_bilinear(image, shorter, w);
    }
    const auto h = static_cast<std::size_t>(
        std::lround(static_cast<double>(image.height) * static_cast<double>(shorter) / static_cast<double>(image.width)));
    return resize_bilinear(image, h, shorter);
}

Image crop_image(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
    if (top + height > image.height || left + width > image.width || height == 0 || width == 0) {
        throw ConfigError("crop " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                          std::to_string(top) + ", " + std::to_string(left) + ") exceeds image " +
                          std::to_string(image.height) + "x" + std::to_string(image.width));
    }
    Image out{image.channels, height, width, std::vector<double>(image.channels * height * width)};
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, top + y, left + x);
    return out;
}

Image center_crop(const Image& image, std::size_t size) {
    if (size > image.height || size > image.width) {
        throw ConfigError("crop " + std::to_string(size) + " larger than image " + std::to_string(image.height) + "x" +
                          std::to_string(image.width));
    }
    return crop_image(image, (image.height - size) / 2, (image.width - size) / 2, size, size);
}

Image mirror_horizontal(const Image& image) {
    Image out = image;
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
    return out;
}

Image subtract_mean(const Image& image, std::span<const double> mean) {
    if (mean.empty()) return image;
    if (mean.size() != image.channels) throw ConfigError("channel mean has wrong length");
    Image out = image;
    const std::size_t area = image.height * image.width;
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t k = 0; k < area; ++k) out.pixels[c * area + k] -= mean[c];
    return out;
}

namespace {

Image maybe_resize(const Image& image, const AugmentSpec& spec) {
    return spec.resize_shorter ? resize_shorter_edge(image, *spec.resize_shorter) : image;
}

}  // namespace

Image augment(const Image& image, const AugmentSpec& spec, std::mt19937_64& rng) {
    const Image resized = maybe_resize(image, spec);
    if (spec.crop == 0 || spec.crop > resized.height || spec.crop > resized.width) {
        throw ConfigError("augment: crop " + std::to_string(spec.crop) + " does not fit " +
                          std::to_string(resized.height) + "x" + std::to_string(resized.width));
    }
    std::uniform_int_distribution<std::size_t> top(0, resized.height - spec.crop);
    std::uniform_int_distribution<std::size_t> left(0, resized.width - spec.crop);
    const std::size_t t = top(rng), l = left(rng);
    Image out = crop_image(resized, t, l, spec.crop, spec.crop);
    if (spec.mirror && std::bernoulli_distribution(0.5)(rng)) out = mirror_horizontal(out);
    return subtract_mean(out, spec.mean);
}

Image eval_view(const Image& image, const AugmentSpec& spec) {
    const Image resized = maybe_resize(image, spec);
    return subtract_mean(spec.crop == 0 ? resized : center_crop(resized, spec.crop), spec.mean);
}

std::vector<Image> eval_views(const Dataset& data, const AugmentSpec& spec) {
    std::vector<Image> out;
    out.reserve(data.size());
    for (const auto& s : data.samples()) out.push_back(eval_view(s.image, spec));
    return out;
}

std::array<Image, 10> ten_crop(const Image& image, std::size_t crop) {
    if (crop == 0 || crop > image.height || crop > image.width) throw ConfigError("ten_crop: crop does not fit image");
    const std::size_t bottom = image.height - crop, right = image.width - crop;
    std::array<Image, 10> out;
    out[0] = crop_image(image, 0, 0, crop, crop);
    out[1] = crop_image(image, 0, right, crop, crop);
    out[2] = crop_image(image, bottom, 0, crop, crop);
    out[3] = crop_image(image, bottom, right, crop, crop);
    out[4] = center_crop(image, crop);
    for (std::size_t i = 0; i < 5; ++i) out[5 + i] = mirror_horizontal(out[i]);
    return out;
}

std::array<Image, 10> ten_crop_views(const Image& image, const AugmentSpec& spec) {
    auto crops = ten_crop(maybe_resize(image, spec), spec.crop);
    for (auto& c : crops) c = subtract_mean(c, spec.mean);
    return crops;
}

Tensor stack_images(std::span<const Image> images) {
    if (images.empty()) throw ShapeError("stack_images: empty batch");
    const auto& f = images.front();
    std::vector<double> data;
    data.reserve(images.size() * f.pixels.size());
    for (const auto& im : images) {
        if (im.channels != f.channels || im.height != f.height || im.width != f.width) {
            throw ShapeError("stack_images: images differ in extent");
        }
        data.insert(data.end(), im.pixels.begin(), im.pixels.end());
    }
    return Tensor::from_data({images.size(), f.channels, f.height, f.width}, std::move(data));
}

}  // namespace delta
