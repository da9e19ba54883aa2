#include <doctest.h>

#include "dml/incremental.hpp"
#include "dml/model.hpp"
#include "dml/pnm.hpp"
#include "dml/shapesworld.hpp"
#include "helpers.hpp"

using dml::BinaryMask;
using dml::ClassId;
using dml::ModelState;
using dml::PrototypeSet;
using dml::SegMap;
using dml::Tensor;
using oracle::Vec;
using testing::random_vec;
using testing::tensor_from;

namespace {

template <class T>
dml::Grid<T> grid(std::size_t h, std::size_t w, std::vector<T> v) {
  dml::Grid<T> m(h, w);
  m.values = std::move(v);
  return m;
}

// Algorithm 1 traced directly: heads in order, then the annotation.
SegMap oracle_pseudo_labels(const SegMap& m_in, const std::vector<BinaryMask>& heads, const BinaryMask* ann,
                            std::size_t N) {
  SegMap out = m_in;
  for (std::size_t t = 0; t < heads.size(); ++t)
    for (std::size_t p = 0; p < out.size(); ++p)
      if (heads[t].values[p]) out.values[p] = ClassId(N + t);
  if (ann)
    for (std::size_t p = 0; p < out.size(); ++p)
      if (ann->values[p]) out.values[p] = ClassId(N + heads.size());
  return out;
}

BinaryMask random_mask(std::mt19937_64& g, std::size_t h, std::size_t w, std::size_t one_in) {
  BinaryMask m(h, w);
  for (auto& v : m.values) v = oracle::below(g, one_in) == 0;
  return m;
}

ModelState small_model(std::uint64_t seed = 1) {
  return dml::make_model({3, 6, 2}, {"background", "a", "b"}, 3.0, seed);
}

Tensor random_image(std::uint64_t seed, std::size_t h = 8, std::size_t w = 8) {
  std::mt19937_64 g = oracle::rng(seed);
  return tensor_from(random_vec(g, 3 * h * w, 0, 1), {3, h, w});
}

std::vector<std::uint64_t> digests(const std::vector<Tensor>& ts) {
  std::vector<std::uint64_t> out;
  for (const auto& t : ts) out.push_back(dml::tensor_digest(t));
  return out;
}

}  // namespace

TEST_CASE("Algorithm 1 hand-traced 2x2 example") {
  const auto m_in = grid<ClassId>(2, 2, {0, 1, 2, 0});
  const std::vector<BinaryMask> heads = {grid<std::uint8_t>(2, 2, {1, 0, 1, 0})};
  const auto ann = grid<std::uint8_t>(2, 2, {0, 0, 1, 1});
  CHECK(dml::pseudo_label_generate(m_in, heads, ann, 3).values == std::vector<ClassId>{3, 1, 4, 4});
  // k = 0: annotation only.
  CHECK(dml::pseudo_label_generate(m_in, {}, ann, 3).values == std::vector<ClassId>{0, 1, 3, 3});
}

TEST_CASE("later heads override earlier ones and the annotation overrides all") {
  const auto m_in = grid<ClassId>(1, 3, {0, 1, 2});
  const std::vector<BinaryMask> heads = {grid<std::uint8_t>(1, 3, {1, 1, 0}), grid<std::uint8_t>(1, 3, {0, 1, 1})};
  CHECK(dml::compose_head_maps(m_in, heads, 3).values == std::vector<ClassId>{3, 4, 4});
  const auto ann = grid<std::uint8_t>(1, 3, {0, 1, 0});
  CHECK(dml::pseudo_label_generate(m_in, heads, ann, 3).values == std::vector<ClassId>{3, 5, 4});
}

TEST_CASE("pseudo labels match the traced algorithm on random map stacks") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 g = oracle::rng(seed);
    const std::size_t N = 2 + oracle::below(g, 4), k = oracle::below(g, 4), H = 1 + oracle::below(g, 6),
                      W = 1 + oracle::below(g, 6);
    SegMap m_in(H, W);
    for (auto& v : m_in.values) v = ClassId(oracle::below(g, N));
    std::vector<BinaryMask> heads;
    for (std::size_t t = 0; t < k; ++t) heads.push_back(random_mask(g, H, W, 3));
    const BinaryMask ann = random_mask(g, H, W, 4);
    CHECK(dml::compose_head_maps(m_in, heads, N) == oracle_pseudo_labels(m_in, heads, nullptr, N));
    CHECK(dml::pseudo_label_generate(m_in, heads, ann, N) == oracle_pseudo_labels(m_in, heads, &ann, N));
  }
}

TEST_CASE("pseudo labels equal live multi-head inference plus the annotation overwrite") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 g = oracle::rng(seed + 10);
    ModelState m = small_model(seed);
    const std::size_t k = oracle::below(g, 4);
    for (std::size_t t = 0; t < k; ++t) dml::add_head(m, "novel" + std::to_string(t), seed * 10 + t);
    const Tensor image = random_image(seed);
    const BinaryMask ann = random_mask(g, 8, 8, 5);

    const SegMap m_in = dml::closeset_map(dml::forward_features(m, 0, image), m.prototypes(0));
    std::vector<BinaryMask> heads;
    for (std::size_t t = 1; t <= k; ++t) heads.push_back(dml::binary_head_map(m, t, image));
    const SegMap live = dml::plm_inference(m, image);
    SegMap expected = live;
    for (std::size_t p = 0; p < expected.size(); ++p)
      if (ann.values[p]) expected.values[p] = ClassId(m.n_classes + k);
    CHECK(dml::pseudo_label_generate(m_in, heads, ann, m.n_classes) == expected);
    for (auto v : live.values) CHECK(v < m.n_classes + k);
  }
}

TEST_CASE("binary head maps") {
  ModelState m = small_model();
  const Tensor image = random_image(3);
  CHECK_THROWS(dml::binary_head_map(m, 0, image));
  CHECK_THROWS(dml::binary_head_map(m, 1, image));
  dml::add_head(m, "x", 5);
  CHECK(m.head(1).spec.metric_dim == 4);
  CHECK(*m.head(1).spec.owned_class == 3);
  const BinaryMask b = dml::binary_head_map(m, 1, image);
  for (auto v : b.values) CHECK(v <= 1);
  // With only h_in, live inference is the close-set map.
  ModelState base = small_model();
  CHECK(dml::plm_inference(base, image) == dml::closeset_map(dml::forward_features(base, 0, image), base.prototypes(0)));
}

TEST_CASE("novel prototype is the pixel-weighted pooled mean") {
  const Tensor f1({2, 1, 2}, {1, 0, 0, 1});  // pixels (1,0) and (0,1)
  const std::vector<Tensor> one = {f1};
  CHECK(dml::novel_prototype(one, std::vector<BinaryMask>{grid<std::uint8_t>(1, 2, {1, 0})}) ==
        std::vector<float>{1, 0});
  CHECK(dml::novel_prototype(one, std::vector<BinaryMask>{grid<std::uint8_t>(1, 2, {1, 1})}) ==
        std::vector<float>{0.5f, 0.5f});

  // 3 masked pixels at (4,0) plus 1 at (0,4): weights 3:1.
  const Tensor a({2, 1, 3}, {4, 4, 4, 0, 0, 0});
  const Tensor b({2, 1, 1}, {0, 4});
  const auto m = dml::novel_prototype(std::vector<Tensor>{a, b},
                                      std::vector<BinaryMask>{grid<std::uint8_t>(1, 3, {1, 1, 1}),
                                                              grid<std::uint8_t>(1, 1, {1})});
  CHECK(m[0] == doctest::Approx(3.0));
  CHECK(m[1] == doctest::Approx(1.0));

  CHECK_THROWS(dml::novel_prototype(one, std::vector<BinaryMask>{grid<std::uint8_t>(1, 2, {0, 0})}));
}

TEST_CASE("NPM classification rule") {
  PrototypeSet protos(3, 3.0);
  CHECK_THROWS(dml::npm_classify(Tensor::zeros({3, 1, 1}), protos, 1.5));
  protos.add_novel({1.0f, 1.0f, 1.0f});

  // At the novel prototype.
  CHECK(dml::npm_classify(Tensor({3, 1, 1}, {1, 1, 1}), protos, 0.01).values[0] == 3);
  // Distance exactly lambda: (1.5, 1, 1) is 0.25 away.
  CHECK(dml::npm_classify(Tensor({3, 1, 1}, {1.5f, 1, 1}), protos, 0.25).values[0] == 0);
  CHECK(dml::npm_classify(Tensor({3, 1, 1}, {1.5f, 1, 1}), protos, 0.2501).values[0] == 3);
  // Nearer to base prototype 2 than to the novel one: base label whatever lambda is.
  CHECK(dml::npm_classify(Tensor({3, 1, 1}, {0, 0, 2.5f}), protos, 1e6).values[0] == 2);

  // Two novel prototypes: the nearer one wins.
  protos.add_novel({0.0f, 0.0f, 0.0f});
  CHECK(dml::npm_classify(Tensor({3, 1, 1}, {0.2f, 0.2f, 0.2f}), protos, 10.0).values[0] == 4);
  CHECK(dml::npm_classify(Tensor({3, 1, 1}, {0.9f, 0.9f, 0.9f}), protos, 10.0).values[0] == 3);
}

TEST_CASE("NPM with lambda 0 is the base close-set map") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 g = oracle::rng(seed);
    const std::size_t N = 2 + oracle::below(g, 4), H = 1 + oracle::below(g, 4), W = 1 + oracle::below(g, 4);
    PrototypeSet protos(N, 3.0);
    std::vector<float> m(N);
    for (auto& v : m) v = float(oracle::uniform(g, 0, 2));
    protos.add_novel(m);
    const Tensor f = tensor_from(random_vec(g, N * H * W, -1, 4), {N, H, W});
    CHECK(dml::npm_classify(f, protos, 0.0) == dml::closeset_map(f, protos));
  }
}

TEST_CASE("NPM never changes the model; PLM freezes everything it did not add") {
  ModelState m = small_model(9);
  const Tensor img1 = random_image(21), img2 = random_image(22);
  std::mt19937_64 g = oracle::rng(5);
  const std::vector<dml::IncrementalShot> shots = {{img1, random_mask(g, 8, 8, 4)}, {img2, random_mask(g, 8, 8, 4)}};

  const auto ckpt_before = dml::serialize_checkpoint(m);
  PrototypeSet protos = m.prototypes(0);
  const auto r1 = dml::register_npm_class(m, protos, shots, "x", 1.5);
  const auto r2 = dml::register_npm_class(m, protos, shots, "y", 1.5);
  CHECK(dml::serialize_checkpoint(m) == ckpt_before);
  CHECK(r1.id == 3);
  CHECK(r2.id == 4);
  CHECK(r1.prototype.size() == 3);
  CHECK(r1.mode == dml::IncrementalMode::Npm);

  const auto frozen = digests(m.parameters());
  dml::PlmHyper hyper;
  hyper.iterations = 20;
  const auto rec = dml::train_plm_head(m, shots, "x", hyper);
  CHECK(m.head_count() == 2);
  CHECK(*rec.head_index == 1);
  CHECK(rec.id == 3);
  const auto now = digests(m.parameters());
  REQUIRE(now.size() == frozen.size() + 2);
  for (std::size_t i = 0; i < frozen.size(); ++i) CHECK(now[i] == frozen[i]);
  CHECK(m.head(1).conv.weight.shape() == dml::Shape{4, 6, 1, 1});

  CHECK_THROWS(dml::train_plm_head(m, {}, "z", hyper));
  CHECK_THROWS(dml::register_npm_class(m, protos, {}, "z", 1.5));
}

TEST_CASE("fine-tuning changes the backbone") {
  ModelState m = small_model(4);
  std::mt19937_64 g = oracle::rng(8);
  const std::vector<dml::IncrementalShot> shots = {{random_image(31), random_mask(g, 8, 8, 3)}};
  const auto before = dml::tensor_digest(m.backbone[0].weight);
  dml::PlmHyper hyper;
  hyper.iterations = 5;
  const auto rec = dml::finetune_novel(m, shots, "x", hyper);
  CHECK(rec.mode == dml::IncrementalMode::Finetune);
  CHECK(dml::tensor_digest(m.backbone[0].weight) != before);
}

TEST_CASE("PLM learning rate follows the shot count") {
  dml::PlmHyper h;
  CHECK(h.lr_for(5) == doctest::Approx(0.01));
  CHECK(h.lr_for(1) == doctest::Approx(0.001));
  h.learning_rate = 0.5f;
  CHECK(h.lr_for(1) == 0.5f);
}

TEST_CASE("mask PGM codec is lossless and strict") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 g = oracle::rng(seed);
    const BinaryMask m = random_mask(g, 1 + oracle::below(g, 20), 1 + oracle::below(g, 20), 2);
    const std::string bytes = dml::encode_mask_pgm(m);
    CHECK(dml::decode_mask_pgm(bytes, "m") == m);
  }
  dml::GrayImage bad(1, 2);
  bad.values = {0, 128};
  CHECK_THROWS(dml::decode_mask_pgm(dml::encode_pgm(bad), "bad"));
  BinaryMask not_binary(1, 1, 2);
  CHECK_THROWS(dml::encode_mask_pgm(not_binary));
}

TEST_CASE("annotation interchange round trip") {
  const auto dir = testing::scratch_dir("annotations");
  std::mt19937_64 g = oracle::rng(3);
  std::vector<dml::Annotation> shots;
  for (std::size_t q = 0; q < 3; ++q) {
    dml::Annotation a;
    a.image = {dml::Split::TestOod, 4 + q};
    a.mask = random_mask(g, 6, 7, 2);
    a.class_name = "star";
    a.shot_index = q;
    shots.push_back(a);
  }
  dml::write_annotation_set(dir, shots);
  CHECK(std::filesystem::exists(dir / "shot_00" / "annotation.json"));
  CHECK(std::filesystem::exists(dir / "shot_02" / "mask.pgm"));
  const auto back = dml::read_annotation_set(dir);
  REQUIRE(back.size() == 3);
  for (std::size_t q = 0; q < 3; ++q) {
    CHECK(back[q].mask == shots[q].mask);
    CHECK(back[q].image.index == shots[q].image.index);
    CHECK(back[q].image.split == dml::Split::TestOod);
    CHECK(back[q].class_name == "star");
    CHECK(back[q].shot_index == q);
  }
  dml::write_file(dir / "shot_01" / "annotation.json", "{\"scene\": 3}");
  CHECK_THROWS_AS(dml::read_annotation_set(dir), dml::FormatError);
}

TEST_CASE("annotation validation") {
  dml::Annotation a;
  a.mask = BinaryMask(4, 4);
  CHECK_NOTHROW(dml::validate(a, 4, 4));
  CHECK_THROWS(dml::validate(a, 4, 5));
  a.mask.values[3] = 7;
  CHECK_THROWS(dml::validate(a, 4, 4));
}
