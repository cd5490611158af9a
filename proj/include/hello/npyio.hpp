#pragma once

#include <string>
#include <variant>

#include "hello/archive.hpp"
#include "hello/tensor.hpp"

namespace hello {

// Minimal .npy v1.0 reader/writer: little-endian '<f4'/'<f8', C order only.
// This is the one-way bridge for importing externally trained encoder
// weights; everything inside the toolkit uses TensorArchive.
using NpyValue = std::variant<Tensorf, Tensord>;

void save_npy(const std::string& path, const Tensorf& t);
void save_npy(const std::string& path, const Tensord& t);

// FormatError on foreign descr / fortran order / version, TruncationError on
// short payload, IoError on unreadable path.
NpyValue load_npy(const std::string& path);

// Import manifest (JSON):
//   {
//     "arch": "toy_cnn",
//     "d_f": 64,
//     "input_shape": [3, 32, 32],
//     "pixel_mean": [...], "pixel_std": [...],
//     "tensors": {"enc/conv0/w": "conv0_w.npy", ...},
//     "text_table": "table.npy"
//   }
// npy paths are relative to the manifest file. The result is the standard
// encoder-pair archive layout; the encoder and text table are loaded once to
// validate shapes before the archive is returned.
TensorArchive import_encoder_archive(const std::string& manifest_path);

}  // namespace hello
