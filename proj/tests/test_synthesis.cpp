#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <tuple>

#include "hello/common.hpp"
#include "hello/dataset.hpp"
#include "hello/encoders.hpp"
#include "hello/nn.hpp"
#include "hello/rng.hpp"
#include "hello/synthesis.hpp"

using namespace hello;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / "hello_test_synthesis" / leaf;
  fs::create_directories(p);
  return p;
}

LabeledDataset small_dataset(int64_t classes, int64_t per_class) {
  ToySpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.channels = 3;
  spec.height = 8;
  spec.width = 8;
  Rng rng(91);
  return make_toy_dataset(spec, "train", rng);
}

ConvNet<float> observer_net(int64_t classes) {
  ConvNet<float> net(make_convnet_spec("micro", "o/", 3, 8, 8, classes));
  Rng rng(17);
  net.init_weights(rng);
  return net;
}

// Constant uniform-logit observer: every patch costs exactly ln(classes).
Observer flat_observer(int64_t classes) {
  Observer obs;
  obs.in_c = 3;
  obs.in_h = 8;
  obs.in_w = 8;
  obs.classes = classes;
  obs.forward = [classes](const Tensorf& images) {
    return Tensorf::zeros({images.dim(0), classes});
  };
  return obs;
}

PatchCandidate make_candidate(double difficulty, int64_t source, CropBox box,
                              int32_t label) {
  PatchCandidate c;
  c.pixels = Tensorf::zeros({3, box.h, box.w});
  c.source = source;
  c.box = box;
  c.label = label;
  c.difficulty = difficulty;
  return c;
}

using Key = std::tuple<double, int64_t, int64_t, int64_t, int64_t, int64_t>;

Key key_of(const PatchCandidate& p) {
  return {p.difficulty, p.source, p.box.x, p.box.y, p.box.w, p.box.h};
}

}  // namespace

TEST_CASE("crop_candidates emits in-bounds square crops of the source") {
  LabeledDataset ds = small_dataset(2, 5);
  Rng rng(3);
  std::vector<PatchCandidate> pool = crop_candidates(ds, 6, 0.3, 1.0, rng);
  REQUIRE(static_cast<int64_t>(pool.size()) == ds.count() * 6);

  const int64_t h = ds.height(), w = ds.width(), ch = ds.channels();
  for (const auto& cand : pool) {
    CHECK(cand.box.w == cand.box.h);
    CHECK(cand.box.x >= 0);
    CHECK(cand.box.y >= 0);
    CHECK(cand.box.x + cand.box.w <= w);
    CHECK(cand.box.y + cand.box.h <= h);
    CHECK(cand.box.w >= 1);
    CHECK(cand.label == ds.hard_labels[static_cast<std::size_t>(cand.source)]);
    REQUIRE(cand.pixels.shape == Shape{ch, cand.box.h, cand.box.w});
    // Pixels are copied verbatim from the source window.
    for (int64_t c = 0; c < ch; ++c)
      for (int64_t yy = 0; yy < cand.box.h; ++yy)
        for (int64_t xx = 0; xx < cand.box.w; ++xx) {
          float src = ds.images[((cand.source * ch + c) * h + cand.box.y + yy) * w +
                                cand.box.x + xx];
          CHECK(cand.pixels[(c * cand.box.h + yy) * cand.box.w + xx] == src);
        }
  }

  SUBCASE("same seed reproduces the identical pool") {
    Rng r2(3);
    std::vector<PatchCandidate> again = crop_candidates(ds, 6, 0.3, 1.0, r2);
    REQUIRE(again.size() == pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      CHECK(again[i].source == pool[i].source);
      CHECK(again[i].box.x == pool[i].box.x);
      CHECK(again[i].box.y == pool[i].box.y);
      CHECK(again[i].box.w == pool[i].box.w);
    }
  }

  SUBCASE("min_frac == max_frac == 1 returns whole images") {
    Rng r3(4);
    std::vector<PatchCandidate> full = crop_candidates(ds, 1, 1.0, 1.0, r3);
    REQUIRE(static_cast<int64_t>(full.size()) == ds.count());
    for (const auto& cand : full) {
      CHECK(cand.box.x == 0);
      CHECK(cand.box.y == 0);
      CHECK(cand.box.w == w);
      CHECK(cand.box.h == h);
      for (int64_t i = 0; i < cand.pixels.numel(); ++i)
        CHECK(cand.pixels[i] == ds.images[cand.source * ch * h * w + i]);
    }
  }
}

TEST_CASE("patch difficulty under a flat observer is ln(classes)") {
  LabeledDataset ds = small_dataset(4, 3);
  Observer obs = flat_observer(4);
  Rng rng(5);
  std::vector<PatchCandidate> pool = crop_candidates(ds, 2, 0.5, 1.0, rng);
  score_candidates(obs, pool, 7);
  for (const auto& cand : pool)
    CHECK(cand.difficulty == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("score_candidates matches per-patch difficulty") {
  LabeledDataset ds = small_dataset(2, 4);
  ConvNet<float> net = observer_net(2);
  Observer obs = make_net_observer(net);
  Rng rng(6);
  std::vector<PatchCandidate> pool = crop_candidates(ds, 3, 0.4, 1.0, rng);
  score_candidates(obs, pool, 5);
  for (const auto& cand : pool) {
    double solo = patch_difficulty(obs, cand, cand.label);
    CHECK(cand.difficulty == doctest::Approx(solo).epsilon(1e-5));
    CHECK(std::isfinite(cand.difficulty));
    CHECK(cand.difficulty >= 0.0);
  }
}

TEST_CASE("select_patches returns the exhaustive bottom-k") {
  std::vector<PatchCandidate> pool;
  Rng rng(7);
  for (int64_t i = 0; i < 40; ++i) {
    CropBox box{rng.uniform_int(4), rng.uniform_int(4), 4, 4};
    // Quantized difficulties force plenty of exact ties.
    double d = static_cast<double>(rng.uniform_int(5)) * 0.25;
    pool.push_back(make_candidate(d, rng.uniform_int(10), box, 2));
  }

  std::vector<PatchCandidate> sorted = pool;
  std::sort(sorted.begin(), sorted.end(),
            [](const PatchCandidate& a, const PatchCandidate& b) {
              return key_of(a) < key_of(b);
            });

  for (int64_t k : {1, 5, 17, 40}) {
    std::vector<PatchCandidate> got = select_patches(pool, k);
    REQUIRE(static_cast<int64_t>(got.size()) == k);
    for (int64_t i = 0; i < k; ++i)
      CHECK(key_of(got[static_cast<std::size_t>(i)]) ==
            key_of(sorted[static_cast<std::size_t>(i)]));
  }

  SUBCASE("result is independent of pool order") {
    std::vector<PatchCandidate> shuffled = pool;
    Rng srng(8);
    srng.shuffle(shuffled);
    std::vector<PatchCandidate> a = select_patches(pool, 12);
    std::vector<PatchCandidate> b = select_patches(shuffled, 12);
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(key_of(a[i]) == key_of(b[i]));
  }

  SUBCASE("short pool error names the deficit") {
    CHECK_THROWS_WITH_AS(select_patches(pool, 43),
                         doctest::Contains("short by 3"), ValidationError);
  }

  SUBCASE("mixed-class pools are refused") {
    std::vector<PatchCandidate> mixed = pool;
    mixed.back().label = 1;
    CHECK_THROWS_AS(select_patches(mixed, 2), ValidationError);
  }

  SUBCASE("unscored candidates are refused") {
    std::vector<PatchCandidate> raw = pool;
    raw.front().difficulty = std::nan("");
    CHECK_THROWS_AS(select_patches(raw, 2), ValidationError);
  }
}

TEST_CASE("assemble_image lays patches out row-major on the grid") {
  std::vector<PatchCandidate> cells;
  for (int64_t i = 0; i < 4; ++i) {
    PatchCandidate c = make_candidate(0.0, i, {0, 0, 4, 4}, 3);
    for (int64_t j = 0; j < c.pixels.numel(); ++j)
      c.pixels[j] = static_cast<float>(i + 1) * 0.1f;
    cells.push_back(std::move(c));
  }
  Tensorf img = assemble_image(cells, 2, 8, 8);
  REQUIRE(img.shape == Shape{3, 8, 8});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) {
        int64_t cell = (y / 4) * 2 + (x / 4);
        float expect = static_cast<float>(cell + 1) * 0.1f;
        CHECK(img[(c * 8 + y) * 8 + x] == doctest::Approx(expect).epsilon(1e-6));
      }

  SUBCASE("grid 1 with a constant patch reproduces the constant") {
    PatchCandidate c = make_candidate(0.0, 0, {0, 0, 4, 4}, 3);
    for (int64_t j = 0; j < c.pixels.numel(); ++j) c.pixels[j] = 0.7f;
    Tensorf one = assemble_image({c}, 1, 8, 8);
    for (int64_t j = 0; j < one.numel(); ++j)
      CHECK(one[j] == doctest::Approx(0.7f).epsilon(1e-6));
  }

  SUBCASE("wrong patch count / mixed classes / bad dims are refused") {
    CHECK_THROWS_AS(assemble_image(cells, 3, 9, 9), ValidationError);
    std::vector<PatchCandidate> mixed = cells;
    mixed[1].label = 0;
    CHECK_THROWS_AS(assemble_image(mixed, 2, 8, 8), ValidationError);
    CHECK_THROWS_AS(assemble_image(cells, 2, 7, 8), ConfigError);
  }
}

TEST_CASE("build_synthetic agrees with the crop-score-sort oracle") {
  LabeledDataset ds = small_dataset(2, 10);
  ConvNet<float> net = observer_net(2);
  Observer obs = make_net_observer(net);

  SynthesisConfig cfg;
  cfg.ipc = 1;
  cfg.grid = 2;
  cfg.crops_per_image = 16;
  cfg.min_frac = 0.3;
  cfg.max_frac = 1.0;

  Rng rng(21);
  SyntheticDataset sd = build_synthetic(ds, obs, cfg, rng);
  REQUIRE(sd.data.count() == 2);
  CHECK(sd.ipc == 1);
  CHECK(sd.grid == 2);
  CHECK(sd.data.hard_labels == std::vector<int32_t>{0, 1});
  REQUIRE(sd.provenance.size() == 2);

  // Rebuild the scored pool independently and take the bottom-4 per class.
  Rng oracle_rng(21);
  std::vector<PatchCandidate> pool =
      crop_candidates(ds, cfg.crops_per_image, cfg.min_frac, cfg.max_frac, oracle_rng);
  REQUIRE(pool.size() == 320);
  score_candidates(obs, pool);
  for (int32_t cls = 0; cls < 2; ++cls) {
    std::vector<PatchCandidate> mine;
    for (const auto& cand : pool)
      if (cand.label == cls) mine.push_back(cand);
    std::sort(mine.begin(), mine.end(),
              [](const PatchCandidate& a, const PatchCandidate& b) {
                return key_of(a) < key_of(b);
              });
    const Provenance& prov = sd.provenance[static_cast<std::size_t>(cls)];
    REQUIRE(prov.patches.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(prov.patches[i].source == mine[i].source);
      CHECK(prov.patches[i].box.x == mine[i].box.x);
      CHECK(prov.patches[i].box.y == mine[i].box.y);
      CHECK(prov.patches[i].box.w == mine[i].box.w);
      CHECK(prov.patches[i].box.h == mine[i].box.h);
    }
    // The stored image is the assembly of exactly those four patches.
    std::vector<PatchCandidate> cell(mine.begin(), mine.begin() + 4);
    Tensorf expect = assemble_image(cell, 2, ds.height(), ds.width());
    int64_t img = expect.numel();
    for (int64_t i = 0; i < img; ++i)
      CHECK(sd.data.images[cls * img + i] == expect[i]);
  }

  SUBCASE("reruns with the same seed are bitwise identical") {
    Rng r2(21);
    SyntheticDataset again = build_synthetic(ds, obs, cfg, r2);
    for (int64_t i = 0; i < sd.data.images.numel(); ++i)
      CHECK(again.data.images[i] == sd.data.images[i]);
  }

  SUBCASE("observer class mismatch is refused") {
    Observer bad = flat_observer(6);
    CHECK_THROWS_AS(build_synthetic(ds, bad, cfg, rng), ValidationError);
  }
}

TEST_CASE("degrade keeps constants and rejects bad inputs") {
  Tensorf img({3, 8, 8});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = 0.42f;
  Tensorf out = degrade(img, 2);
  REQUIRE(out.shape == img.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out[i] == doctest::Approx(0.42f).epsilon(1e-6));

  SUBCASE("odd dims survive the floor division") {
    Tensorf odd({2, 5, 7});
    Rng rng(9);
    for (int64_t i = 0; i < odd.numel(); ++i)
      odd[i] = static_cast<float>(rng.uniform());
    Tensorf o = degrade(odd, 2);
    REQUIRE(o.shape == odd.shape);
    for (int64_t i = 0; i < o.numel(); ++i) CHECK(std::isfinite(o[i]));
    // Large factors collapse to a 1x1 mean-like value but stay legal.
    Tensorf tiny = degrade(odd, 100);
    REQUIRE(tiny.shape == odd.shape);
  }

  SUBCASE("factor below 2 and wrong rank are refused") {
    CHECK_THROWS_AS(degrade(img, 1), ConfigError);
    Tensorf flat({4, 4});
    CHECK_THROWS_AS(degrade(flat, 2), ValidationError);
  }
}

TEST_CASE("degradation gradient matches finite differences") {
  Rng rng(23);
  ImageEncoder encf = make_toy_image_encoder("micro", 3, 8, 8, 4, rng);
  ImageEncoderT<double> enc = encoder_cast<float, double>(encf);

  Tensor<double> img({3, 8, 8});
  Rng irng(24);
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = irng.uniform();

  Tensor<double> grad = Tensor<double>::zeros(img.shape);
  double loss = degradation_loss_grad<double>(enc, img, 2, &grad);
  CHECK(loss >= 0.0);

  const double h = 1e-5;
  Rng prng(25);
  for (int64_t probe = 0; probe < 10; ++probe) {
    int64_t i = prng.uniform_int(img.numel());
    Tensor<double> plus = img, minus = img;
    plus[i] += h;
    minus[i] -= h;
    double lp = degradation_loss_grad<double>(enc, plus, 2, nullptr);
    double lm = degradation_loss_grad<double>(enc, minus, 2, nullptr);
    double fd = (lp - lm) / (2.0 * h);
    double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
    CHECK(std::abs(fd - grad[i]) / denom < 1e-4);
  }
}

namespace {

SyntheticDataset constant_set(float value) {
  SyntheticDataset sd;
  sd.ipc = 1;
  sd.grid = 1;
  sd.data.split_tag = "train";
  sd.data.class_names = toy_class_names(2);
  sd.data.images = Tensorf({2, 3, 8, 8});
  for (int64_t i = 0; i < sd.data.images.numel(); ++i)
    sd.data.images[i] = value;
  sd.data.hard_labels = {0, 1};
  sd.provenance.resize(2);
  for (auto& p : sd.provenance) {
    p.grid = 1;
    p.patches = {{0, {0, 0, 8, 8}}};
  }
  return sd;
}

SyntheticDataset built_set() {
  LabeledDataset ds = small_dataset(2, 6);
  ConvNet<float> net = observer_net(2);
  Observer obs = make_net_observer(net);
  SynthesisConfig cfg;
  cfg.ipc = 2;
  cfg.grid = 2;
  cfg.crops_per_image = 8;
  Rng rng(31);
  return build_synthetic(ds, obs, cfg, rng);
}

}  // namespace

TEST_CASE("image_update with zero steps is a bitwise no-op") {
  SyntheticDataset sd = built_set();
  Tensorf before = sd.data.images;
  Rng rng(32);
  ImageEncoder enc = make_toy_image_encoder("micro", 3, 8, 8, 4, rng);
  ImageUpdateConfig cfg;
  cfg.steps = 0;
  ImageUpdateResult res = image_update(sd, enc, cfg);
  REQUIRE(res.mean_loss.size() == 1);
  CHECK(res.updated == sd.data.count());
  CHECK(res.skipped == 0);
  for (int64_t i = 0; i < before.numel(); ++i)
    CHECK(sd.data.images[i] == before[i]);
}

TEST_CASE("image_update leaves a constant image in place") {
  SyntheticDataset sd = constant_set(0.5f);
  Rng rng(33);
  ImageEncoder enc = make_toy_image_encoder("micro", 3, 8, 8, 4, rng);
  ImageUpdateConfig cfg;
  cfg.steps = 2;
  cfg.lr = 0.05;
  ImageUpdateResult res = image_update(sd, enc, cfg);
  // degrade(constant) == constant, so the loss and gradient both vanish.
  for (double l : res.mean_loss) CHECK(l == doctest::Approx(0.0).epsilon(1e-10));
  for (int64_t i = 0; i < sd.data.images.numel(); ++i)
    CHECK(sd.data.images[i] == doctest::Approx(0.5f).epsilon(1e-6));
}

TEST_CASE("image_update descends the degradation loss inside [0,1]") {
  SyntheticDataset sd = built_set();
  std::vector<int32_t> labels_before = sd.data.hard_labels;
  std::vector<Provenance> prov_before = sd.provenance;
  Rng rng(34);
  ImageEncoder enc = make_toy_image_encoder("micro", 3, 8, 8, 4, rng);

  ImageUpdateConfig cfg;
  cfg.steps = 5;
  cfg.lr = 0.05;
  cfg.factor = 2;
  ImageUpdateResult res = image_update(sd, enc, cfg);

  REQUIRE(res.mean_loss.size() == 6);
  CHECK(res.mean_loss.back() < res.mean_loss.front());
  CHECK(res.updated + res.skipped == sd.data.count());
  CHECK(res.updated > 0);
  for (int64_t i = 0; i < sd.data.images.numel(); ++i) {
    CHECK(sd.data.images[i] >= 0.0f);
    CHECK(sd.data.images[i] <= 1.0f);
  }
  CHECK(sd.data.hard_labels == labels_before);
  REQUIRE(sd.provenance.size() == prov_before.size());
  for (std::size_t i = 0; i < prov_before.size(); ++i) {
    CHECK(sd.provenance[i].grid == prov_before[i].grid);
    CHECK(sd.provenance[i].patches.size() == prov_before[i].patches.size());
  }

  SUBCASE("bad update settings are refused") {
    ImageUpdateConfig bad;
    bad.steps = -1;
    CHECK_THROWS_AS(image_update(sd, enc, bad), ConfigError);
    bad = {};
    bad.lr = 0.0;
    CHECK_THROWS_AS(image_update(sd, enc, bad), ConfigError);
    bad = {};
    bad.factor = 1;
    CHECK_THROWS_AS(image_update(sd, enc, bad), ConfigError);
  }
}

TEST_CASE("synthetic archive round-trips images and provenance") {
  SyntheticDataset sd = built_set();
  sd.config_hash = "0123456789abcdef";
  fs::path dir = temp_dir("roundtrip");
  std::string arc = (dir / "images.arc").string();
  std::string man = (dir / "prov.json").string();
  save_synthetic(arc, man, sd);
  SyntheticDataset back = load_synthetic(arc, man);

  CHECK(back.ipc == sd.ipc);
  CHECK(back.grid == sd.grid);
  CHECK(back.config_hash == sd.config_hash);
  CHECK(back.data.hard_labels == sd.data.hard_labels);
  CHECK(back.data.class_names == sd.data.class_names);
  REQUIRE(back.data.images.shape == sd.data.images.shape);
  for (int64_t i = 0; i < sd.data.images.numel(); ++i)
    CHECK(back.data.images[i] == sd.data.images[i]);
  REQUIRE(back.provenance.size() == sd.provenance.size());
  for (std::size_t i = 0; i < sd.provenance.size(); ++i) {
    CHECK(back.provenance[i].grid == sd.provenance[i].grid);
    REQUIRE(back.provenance[i].patches.size() == sd.provenance[i].patches.size());
    for (std::size_t j = 0; j < sd.provenance[i].patches.size(); ++j) {
      CHECK(back.provenance[i].patches[j].source == sd.provenance[i].patches[j].source);
      CHECK(back.provenance[i].patches[j].box.x == sd.provenance[i].patches[j].box.x);
      CHECK(back.provenance[i].patches[j].box.y == sd.provenance[i].patches[j].box.y);
      CHECK(back.provenance[i].patches[j].box.w == sd.provenance[i].patches[j].box.w);
      CHECK(back.provenance[i].patches[j].box.h == sd.provenance[i].patches[j].box.h);
    }
  }

  SUBCASE("mismatched manifest hash is refused") {
    SyntheticDataset other = built_set();
    other.config_hash = "feedfacefeedface";
    fs::path d2 = temp_dir("mismatch");
    std::string arc2 = (d2 / "images.arc").string();
    std::string man2 = (d2 / "prov.json").string();
    save_synthetic(arc2, man2, other);
    CHECK_THROWS_AS(load_synthetic(arc, man2), ValidationError);
  }
}

TEST_CASE("synthesis config validation rejects bad settings") {
  SynthesisConfig cfg;
  cfg.ipc = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.grid = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.crops_per_image = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.min_frac = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.min_frac = 0.9;
  cfg.max_frac = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.max_frac = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  CHECK_NOTHROW(cfg.validate());
}
