// nifti_io.h - NIfTI-1 reading and writing for scalar and label volumes.
//
// Files are written with a qform/sform that encodes spacing, origin and the
// axis codes, plus a small JSON header extension holding the exact double
// precision grid metadata so our own files round-trip bit-for-bit. Label
// tables live in a JSON sidecar next to the image ("seg.nii.gz" ->
// "seg.labels.json").

#pragma once

#include "isomtl/volgrid.h"

#include <filesystem>
#include <variant>

namespace isomtl {

enum class ScalarStorage { Float32, Float64 };

ScalarVolume load_scalar(const std::filesystem::path &path);
LabelVolume load_labels(const std::filesystem::path &path);
/// Integer datatypes load as labels, floating datatypes as scalars.
std::variant<ScalarVolume, LabelVolume> load_volume(const std::filesystem::path &path);

void save_volume(const ScalarVolume &vol, const std::filesystem::path &path,
                 ScalarStorage storage = ScalarStorage::Float32);
void save_volume(const LabelVolume &vol, const std::filesystem::path &path);

std::filesystem::path label_sidecar_path(const std::filesystem::path &image_path);
LabelTable read_label_table(const std::filesystem::path &json_path);
void write_label_table(const LabelTable &table, const std::filesystem::path &json_path);

} // namespace isomtl
