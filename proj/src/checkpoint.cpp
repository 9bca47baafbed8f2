#include "delta/checkpoint.hpp"

#include "delta/errors.hpp"

namespace delta {

namespace {

void put_record(ByteWriter& w, const std::string& name, const Tensor& value, bool head) {
    w.put_string(name);
    w.put<std::uint8_t>(head ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(value.rank()));
    for (auto d : value.shape()) w.put<std::uint64_t>(d);
    w.put_doubles(value.data());
}

struct Record {
    std::string name;
    bool head;
    Tensor value;
};

Record get_record(ByteReader& r) {
    Record rec;
    rec.name = r.get_string("parameter name");
    const auto at = r.offset();
    const auto flag = r.get<std::uint8_t>("head flag");
    if (flag > 1) throw ParseError("head flag must be 0 or 1", at);
    rec.head = flag == 1;
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw ParseError("unsupported rank " + std::to_string(rank), r.offset());
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const auto dim_at = r.offset();
        const auto d = r.get<std::uint64_t>("dimension");
        if (d == 0) throw ParseError("zero extent in " + rec.name, dim_at);
        shape.push_back(d);
    }
    rec.value = Tensor::from_data(shape, r.get_doubles(shape_numel(shape), "parameter values"), true);
    return rec;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ConvNetModel& model) {
    ByteWriter w;
    w.put_magic("DLTA");
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put_string(model_spec_to_json(model.spec_));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params_.size()));
    for (const auto& p : model.params_) put_record(w, p.name, p.value, model.is_head(p.name));
    const auto n_source = model.source_ ? model.source_->size() : 0;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n_source));
    if (model.source_) {
        for (const auto& p : *model.source_) put_record(w, p.name, p.value, false);
    }
    return w.release();
}

ConvNetModel deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("DLTA");
    const auto version_at = r.offset();
    if (r.get<std::uint32_t>("version") != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version", version_at);
    }
    const auto spec_at = r.offset();
    const auto spec_text = r.get_string("model spec");
    ConvNetModel model;
    try {
        model.spec_ = model_spec_from_json(spec_text);
        model.validate_and_index();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("invalid embedded model spec: ") + e.what(), spec_at);
    }

    const auto n_params = r.get<std::uint32_t>("parameter count");
    for (std::uint32_t i = 0; i < n_params; ++i) {
        auto rec = get_record(r);
        if (rec.head) model.head_.insert(rec.name);
        model.params_.push_back({rec.name, rec.value});
    }
    const auto n_source = r.get<std::uint32_t>("source count");
    if (n_source > 0) {
        auto snapshot = std::make_shared<std::vector<NamedTensor>>();
        for (std::uint32_t i = 0; i < n_source; ++i) {
            auto rec = get_record(r);
            rec.value.set_requires_grad(false);
            snapshot->push_back({rec.name, rec.value});
        }
        model.source_ = std::move(snapshot);
    }
    r.expect_end();

    // Every layer's parameters must be present with the shapes the spec implies.
    ConvNetModel reference = build_model(model.spec_, 0);
    if (reference.params_.size() != model.params_.size()) {
        throw ValidationError("checkpoint parameter count does not match its model spec");
    }
    for (std::size_t i = 0; i < reference.params_.size(); ++i) {
        const auto& want = reference.params_[i];
        const auto& got = model.params_[i];
        if (want.name != got.name || want.value.shape() != got.value.shape()) {
            throw ValidationError("checkpoint parameter " + got.name + " " + shape_str(got.value.shape()) +
                                  " does not match spec (" + want.name + " " + shape_str(want.value.shape()) + ")");
        }
    }
    return model;
}

void save_checkpoint(const ConvNetModel& model, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_checkpoint(model));
}

ConvNetModel load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file_bytes(path)); }

}  // namespace delta
