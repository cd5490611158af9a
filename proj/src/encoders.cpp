#include "hello/encoders.hpp"

#include <algorithm>
#include <cctype>

#include "hello/common.hpp"

namespace hello {

TextEncoder::TextEncoder(Tensorf table) : table_(std::move(table)) {
  if (table_.rank() != 2) throw ValidationError("text table must be (vocab, d_f)");
  if (table_.dim(0) < 2) throw ValidationError("text vocab must be >= 2");
  EmbeddingSpace{table_.dim(1)}.validate();
}

std::vector<std::string> tokenize_prompt(const std::string& prompt) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char raw : prompt) {
    auto c = static_cast<unsigned char>(raw);
    if (std::isalnum(c) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

Tensorf TextEncoder::encode_prompt(const std::string& prompt) const {
  std::vector<std::string> tokens = tokenize_prompt(prompt);
  if (tokens.empty()) throw ValidationError("prompt has no tokens: \"" + prompt + "\"");
  int64_t d = d_f();
  Tensorf out = Tensorf::zeros({d});
  for (const auto& tok : tokens) {
    int64_t row = static_cast<int64_t>(fnv1a64(tok) % static_cast<uint64_t>(vocab()));
    for (int64_t j = 0; j < d; ++j) out[j] += table_.at2(row, j);
  }
  float inv = 1.0f / static_cast<float>(tokens.size());
  for (int64_t j = 0; j < d; ++j) out[j] *= inv;
  return out;
}

std::vector<std::vector<std::string>> build_class_prompts(
    const std::vector<std::string>& class_names,
    const std::vector<std::string>& templates) {
  if (class_names.empty()) throw ValidationError("class name list is empty");
  if (templates.empty()) throw ValidationError("template list is empty");
  for (const auto& name : class_names)
    if (name.empty()) throw ValidationError("class names must be non-empty");
  for (const auto& tpl : templates) {
    std::size_t first = tpl.find("{}");
    if (first == std::string::npos)
      throw ValidationError("template lacks the {} placeholder: \"" + tpl + "\"");
    if (tpl.find("{}", first + 1) != std::string::npos)
      throw ValidationError("template has multiple placeholders: \"" + tpl + "\"");
  }
  std::vector<std::vector<std::string>> out;
  out.reserve(class_names.size());
  for (const auto& name : class_names) {
    std::vector<std::string> prompts;
    prompts.reserve(templates.size());
    for (const auto& tpl : templates) {
      std::string p = tpl;
      p.replace(p.find("{}"), 2, name);
      prompts.push_back(std::move(p));
    }
    out.push_back(std::move(prompts));
  }
  return out;
}

Tensorf encode_text(const TextEncoder& enc,
                    const std::vector<std::vector<std::string>>& prompt_sets) {
  if (prompt_sets.empty()) throw ValidationError("no prompt sets given");
  int64_t c = static_cast<int64_t>(prompt_sets.size());
  int64_t d = enc.d_f();
  Tensorf raw = Tensorf::zeros({c, d});
  for (int64_t i = 0; i < c; ++i) {
    const auto& prompts = prompt_sets[static_cast<std::size_t>(i)];
    if (prompts.empty())
      throw ValidationError("prompt set " + std::to_string(i) + " is empty");
    for (const auto& p : prompts) {
      Tensorf e = enc.encode_prompt(p);
      for (int64_t j = 0; j < d; ++j) raw.at2(i, j) += e[j];
    }
    float inv = 1.0f / static_cast<float>(prompts.size());
    for (int64_t j = 0; j < d; ++j) raw.at2(i, j) *= inv;
  }
  return normalize_rows(raw);
}

const std::vector<std::string>& default_prompt_templates() {
  static const std::vector<std::string> kTemplates = {
      "a photo of a {}.",
      "a blurry photo of a {}.",
      "a close-up photo of a {}.",
      "a low resolution photo of a {}.",
      "a bright photo of a {}.",
      "a cropped photo of a {}.",
      "a photo of the large {}.",
  };
  return kTemplates;
}

ImageEncoder make_toy_image_encoder(const std::string& arch, int64_t in_channels,
                                    int64_t in_h, int64_t in_w, int64_t d_f,
                                    Rng& rng) {
  ConvNetSpec spec = make_convnet_spec(arch, "enc/", in_channels, in_h, in_w, d_f);
  std::vector<float> mean(static_cast<std::size_t>(in_channels), 0.5f);
  std::vector<float> std(static_cast<std::size_t>(in_channels), 0.25f);
  ImageEncoder enc(std::move(spec), std::move(mean), std::move(std));
  Rng r = rng.split_tag("toy_image_encoder");
  enc.net_for_backward().init_weights(r);
  return enc;
}

TextEncoder make_toy_text_encoder(int64_t vocab, int64_t d_f, Rng& rng) {
  Tensorf table({vocab, d_f});
  Rng r = rng.split_tag("toy_text_encoder");
  for (int64_t i = 0; i < table.numel(); ++i)
    table[i] = static_cast<float>(r.gauss(0.0, 1.0));
  return TextEncoder(std::move(table));
}

TensorArchive encoder_pair_to_archive(const ImageEncoder& enc, const TextEncoder& txt) {
  if (enc.d_f() != txt.d_f())
    throw ValidationError("image and text encoders disagree on d_f");
  TensorArchive arc;
  enc.net().to_archive(arc);
  arc.put("txt/table", txt.table());
  archive_put_string(arc, "meta/arch", enc.arch());
  archive_put_scalar(arc, "meta/d_f", enc.d_f());
  Tensorf ishape({3});
  ishape[0] = static_cast<float>(enc.in_channels());
  ishape[1] = static_cast<float>(enc.in_h());
  ishape[2] = static_cast<float>(enc.in_w());
  arc.put("meta/input_shape", std::move(ishape));
  Tensorf mean({enc.in_channels()}), std({enc.in_channels()});
  for (int64_t i = 0; i < enc.in_channels(); ++i) {
    mean[i] = enc.pixel_mean()[static_cast<std::size_t>(i)];
    std[i] = enc.pixel_std()[static_cast<std::size_t>(i)];
  }
  arc.put("meta/pixel_mean", std::move(mean));
  arc.put("meta/pixel_std", std::move(std));
  return arc;
}

ImageEncoder load_pretrained_encoder(const TensorArchive& arc, const std::string& arch) {
  std::string stored = archive_get_string(arc, "meta/arch");
  if (stored != arch)
    throw ValidationError("archive holds arch " + stored + ", requested " + arch);
  const Tensorf& ishape = arc.get_f32("meta/input_shape");
  if (ishape.numel() != 3) throw FormatError("meta/input_shape must have 3 entries");
  int64_t in_c = static_cast<int64_t>(ishape[0]);
  int64_t in_h = static_cast<int64_t>(ishape[1]);
  int64_t in_w = static_cast<int64_t>(ishape[2]);
  int64_t d_f = archive_get_scalar(arc, "meta/d_f");
  ConvNetSpec spec = make_convnet_spec(arch, "enc/", in_c, in_h, in_w, d_f);
  const Tensorf& mean_t = arc.get_f32("meta/pixel_mean");
  const Tensorf& std_t = arc.get_f32("meta/pixel_std");
  if (mean_t.numel() != in_c || std_t.numel() != in_c)
    throw FormatError("pixel stats do not match input channels");
  std::vector<float> mean(mean_t.ptr(), mean_t.ptr() + in_c);
  std::vector<float> std(std_t.ptr(), std_t.ptr() + in_c);
  ImageEncoder enc(std::move(spec), std::move(mean), std::move(std));
  enc.net_for_backward().from_archive(arc);
  return enc;
}

TextEncoder load_text_encoder(const TensorArchive& arc) {
  if (!arc.contains("txt/table"))
    throw FormatError("archive has no text-encoder table (txt/table)");
  return TextEncoder(arc.get_f32("txt/table"));
}

std::string encoder_id_of(const TensorArchive& arc) {
  uint64_t h = fnv1a64("encoder");
  for (const auto& name : arc.names()) {
    h = fnv1a64(name, h);
    if (arc.width(name) == 4) {
      const Tensorf& t = arc.get_f32(name);
      h = fnv1a64(t.ptr(), sizeof(float) * static_cast<std::size_t>(t.numel()), h);
    } else {
      const Tensord& t = arc.get_f64(name);
      h = fnv1a64(t.ptr(), sizeof(double) * static_cast<std::size_t>(t.numel()), h);
    }
  }
  std::string arch = arc.contains("meta/arch") ? archive_get_string(arc, "meta/arch")
                                               : std::string("unknown");
  return arch + ":" + hex64(h);
}

}  // namespace hello
