#include "hello/projector.hpp"

#include "hello/common.hpp"

namespace hello {

ProjectorArtifact make_projector_artifact(const Projector& p,
                                          const std::string& config_hash) {
  if (p.merged())
    throw ValidationError("a merged projector has no adapters to store");
  ProjectorArtifact art;
  art.encoder_id = p.encoder_id();
  art.adapters = p.adapters();
  auto it = art.adapters.find(kHeadTarget);
  art.head_rank = it == art.adapters.end() ? 0 : it->second.rank();
  art.class_names = p.class_names();
  art.templates = p.templates();
  art.config_hash = config_hash;
  return art;
}

TensorArchive artifact_to_archive(const ProjectorArtifact& art) {
  TensorArchive arc;
  for (const auto& [name, ad] : art.adapters) {
    arc.put("lora/" + name + "/A", ad.A);
    arc.put("lora/" + name + "/B", ad.B);
    Tensorf meta({2});
    meta[0] = static_cast<float>(ad.rank());
    meta[1] = ad.scale;
    arc.put("lora/" + name + "/meta", std::move(meta));
  }
  archive_put_scalar(arc, "head/rank", art.head_rank);
  archive_put_string(arc, "meta/encoder_id", art.encoder_id);
  archive_put_strings(arc, "meta/class_names", art.class_names);
  archive_put_strings(arc, "meta/templates", art.templates);
  archive_put_string(arc, "meta/config_hash", art.config_hash);
  return arc;
}

ProjectorArtifact artifact_from_archive(const TensorArchive& arc) {
  ProjectorArtifact art;
  art.encoder_id = archive_get_string(arc, "meta/encoder_id");
  art.class_names = archive_get_strings(arc, "meta/class_names");
  art.templates = archive_get_strings(arc, "meta/templates");
  art.config_hash = archive_get_string(arc, "meta/config_hash");
  art.head_rank = archive_get_scalar(arc, "head/rank");
  const std::string prefix = "lora/";
  for (const auto& name : arc.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (name.size() < 2 || name.compare(name.size() - 2, 2, "/A") != 0) continue;
    std::string target = name.substr(prefix.size(), name.size() - prefix.size() - 2);
    LoraAdapter<float> ad;
    ad.target_name = target;
    ad.A = arc.get_f32(prefix + target + "/A");
    ad.B = arc.get_f32(prefix + target + "/B");
    const Tensorf& meta = arc.get_f32(prefix + target + "/meta");
    if (meta.numel() != 2)
      throw FormatError("adapter meta for " + target + " must hold [rank, scale]");
    ad.scale = meta[1];
    ad.validate();
    if (ad.rank() != static_cast<int64_t>(meta[0]))
      throw FormatError("adapter rank mismatch for " + target);
    art.adapters.emplace(target, std::move(ad));
  }
  if (art.adapters.empty()) throw FormatError("artifact holds no adapters");
  return art;
}

StorageCount count_projector_storage(const ProjectorArtifact& art) {
  StorageCount c;
  for (const auto& [name, ad] : art.adapters)
    c.param_count += ad.A.numel() + ad.B.numel();
  c.param_bytes = c.param_count * 4;
  c.artifact_bytes = static_cast<int64_t>(artifact_to_archive(art).byte_size());
  return c;
}

void save_projector(const ProjectorArtifact& art, const std::string& path) {
  artifact_to_archive(art).save_file(path);
}

Projector load_projector(const std::string& path, const TensorArchive& encoder_arc,
                         const TextEncoder& txt) {
  TensorArchive arc = TensorArchive::load_file(path);
  ProjectorArtifact art = artifact_from_archive(arc);

  std::string supplied_id = encoder_id_of(encoder_arc);
  if (supplied_id != art.encoder_id)
    throw ValidationError("artifact was built against encoder " + art.encoder_id +
                          " but the supplied archive is " + supplied_id);

  std::string arch = archive_get_string(encoder_arc, "meta/arch");
  ImageEncoder enc = load_pretrained_encoder(encoder_arc, arch);
  Tensorf v_T = encode_text(txt, build_class_prompts(art.class_names, art.templates));
  LinearHead head = init_head_from_text(v_T);

  Projector p(std::move(enc), std::move(head), art.encoder_id, art.class_names,
              art.templates);
  p.set_adapters(std::move(art.adapters));
  return p;
}

}  // namespace hello
