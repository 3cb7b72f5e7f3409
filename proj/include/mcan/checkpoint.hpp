#pragma once

// Model checkpoints in the tensor container format: the header meta carries
// the backbone config, the payload every parameter as float32 in slot order.

#include <filesystem>
#include <string>

#include "mcan/backbone.hpp"
#include "mcan/config.hpp"
#include "mcan/tensor_io.hpp"

namespace mcan {

inline constexpr const char* kCheckpointFormat = "mcan-checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <class T>
TensorFile checkpoint_tensors(const Model<T>& model) {
    TensorFile file;
    file.meta = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"config", to_json(model.config())}};
    for (const auto& s : const_cast<Model<T>&>(model).slots()) {
        NamedTensor t{s.name, {s.rows, s.cols}, {}};
        t.values.reserve(std::size_t(s.size()));
        for (Eigen::Index j = 0; j < s.size(); ++j) t.values.push_back(float(s.data[j]));
        file.tensors.push_back(std::move(t));
    }
    return file;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    write_tensor_file(checkpoint_tensors(model), path);
}

inline Model<float> model_from_tensors(const TensorFile& file, const std::string& origin) {
    if (file.meta.value("format", "") != kCheckpointFormat)
        throw TensorFileError("'" + origin + "' is not a model checkpoint");
    Model<float> model(backbone_from_json(file.meta.at("config")));
    auto slots = model.slots();
    if (slots.size() != file.tensors.size())
        throw TensorFileError("'" + origin + "': expected " + std::to_string(slots.size()) + " tensors, found " +
                              std::to_string(file.tensors.size()));
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& t = file.tensors[i];
        if (t.name != slots[i].name || t.shape.size() != 2 || t.shape[0] != slots[i].rows || t.shape[1] != slots[i].cols)
            throw TensorFileError("'" + origin + "': tensor " + std::to_string(i) + " ('" + t.name + "') does not match '" +
                                  slots[i].name + "'");
        std::copy(t.values.begin(), t.values.end(), slots[i].data);
    }
    return model;
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
    return model_from_tensors(read_tensor_file(path), path.string());
}

}  // namespace mcan
