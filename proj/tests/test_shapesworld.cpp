#include <doctest.h>

#include <set>

#include "dml/shapesworld.hpp"
#include "helpers.hpp"

using dml::Split;
using dml::WorldSpec;

namespace {

bool contains_any(const dml::SegMap& m, const std::vector<dml::ClassId>& ids) {
  for (auto v : m.values)
    if (std::find(ids.begin(), ids.end(), v) != ids.end()) return true;
  return false;
}

}  // namespace

TEST_CASE("scenes are deterministic per (seed, split, index)") {
  const WorldSpec spec = WorldSpec::defaults();
  const auto a = dml::generate_scene(spec, Split::Val, 7);
  const auto b = dml::generate_scene(spec, Split::Val, 7);
  CHECK(a.pixels == b.pixels);
  CHECK(a.label == b.label);
  CHECK(a.seed == b.seed);
  const auto c = dml::generate_scene(spec, Split::Train, 7);
  CHECK_FALSE(a.pixels == c.pixels);
  WorldSpec other = spec;
  other.seed = 43;
  CHECK_FALSE(dml::generate_scene(other, Split::Val, 7).pixels == a.pixels);
}

TEST_CASE("held-out classes never appear in train or val labels") {
  WorldSpec spec = WorldSpec::defaults();
  const auto ood = spec.ood_ids();
  for (Split s : {Split::Train, Split::Val})
    for (const auto& sample : dml::generate(spec, s, 100)) CHECK_FALSE(contains_any(sample.label, ood));

  // Even when held-out shapes are painted into training scenes they are
  // labelled 255.
  spec.train_ood_rate = 1.0f;
  std::size_t ignored = 0;
  for (const auto& sample : dml::generate(spec, Split::Train, 20)) {
    CHECK_FALSE(contains_any(sample.label, ood));
    ignored += std::count(sample.label.values.begin(), sample.label.values.end(), dml::kIgnoreId);
  }
  CHECK(ignored > 0);
}

TEST_CASE("every test_ood scene holds at least one held-out pixel") {
  const WorldSpec spec = WorldSpec::defaults();
  for (const auto& sample : dml::generate(spec, Split::TestOod, 50)) CHECK(contains_any(sample.label, spec.ood_ids()));
}

TEST_CASE("label ids are registered") {
  const WorldSpec spec = WorldSpec::defaults();
  const auto names = spec.class_names();
  CHECK(spec.in_dist_count() == 5);
  CHECK(spec.ood_ids() == std::vector<dml::ClassId>{5, 6});
  CHECK(names.at(0) == "background");
  CHECK(names.at(5) == "star");
  CHECK(names.at(6) == "cross");
  for (Split s : {Split::Train, Split::TestOod})
    for (const auto& sample : dml::generate(spec, s, 30))
      for (auto v : sample.label.values) CHECK((names.count(v) == 1 || v == dml::kIgnoreId));
}

TEST_CASE("every in-distribution class covers at least 2% of training pixels") {
  const WorldSpec spec = WorldSpec::defaults();
  std::map<dml::ClassId, std::size_t> hist;
  std::size_t total = 0;
  for (const auto& sample : dml::generate(spec, Split::Train, 200))
    for (auto v : sample.label.values) {
      ++hist[v];
      ++total;
    }
  for (dml::ClassId c = 0; c < spec.in_dist_count(); ++c) {
    CAPTURE(int(c));
    CHECK(double(hist[c]) / double(total) >= 0.02);
  }
}

TEST_CASE("held-out shape kinds are absent from the in-distribution set") {
  const WorldSpec spec = WorldSpec::defaults();
  std::set<dml::ShapeKind> known;
  for (const auto& d : spec.in_dist) known.insert(d.kind);
  for (const auto& d : spec.ood) CHECK(known.count(d.kind) == 0);
}

TEST_CASE("spec validation") {
  WorldSpec spec = WorldSpec::defaults();
  CHECK_NOTHROW(spec.validate());
  spec.height = 8;
  CHECK_THROWS(spec.validate());
  spec = WorldSpec::defaults();
  spec.in_dist.push_back(spec.in_dist[0]);
  CHECK_THROWS(spec.validate());
}

TEST_CASE("dataset round trip") {
  WorldSpec spec = WorldSpec::defaults();
  const auto data = dml::generate_dataset(spec, 4, 3, 3);
  const auto dir = testing::scratch_dir("dataset");
  dml::write_dataset(dir, data);

  const std::string pgm = dml::read_file(dir / "train" / "lbl_00000.pgm");
  CHECK(pgm.rfind("P5\n32 32\n255\n", 0) == 0);
  const auto manifest = nlohmann::json::parse(dml::read_file(dir / "manifest.json"));
  for (const auto& [split, entry] : manifest.at("splits").items())
    for (const auto& f : entry.at("files")) {
      CHECK(std::filesystem::exists(dir / f.at("image").get<std::string>()));
      CHECK(std::filesystem::exists(dir / f.at("label").get<std::string>()));
    }

  const auto back = dml::read_dataset(dir);
  for (Split s : {Split::Train, Split::Val, Split::TestOod}) {
    REQUIRE(back.split(s).size() == data.split(s).size());
    for (std::size_t i = 0; i < data.split(s).size(); ++i) {
      CHECK(back.split(s)[i].label == data.split(s)[i].label);
      CHECK(back.split(s)[i].pixels == data.split(s)[i].pixels);
      CHECK(back.split(s)[i].seed == data.split(s)[i].seed);
    }
  }
  CHECK(back.spec.class_names() == spec.class_names());

  // Writing again yields byte-identical files.
  const auto dir2 = testing::scratch_dir("dataset2");
  dml::write_dataset(dir2, dml::generate_dataset(spec, 4, 3, 3));
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), dir);
    CHECK(dml::read_file(e.path()) == dml::read_file(dir2 / rel));
  }

  SUBCASE("malformed header") {
    dml::write_file(dir / "val" / "lbl_00001.pgm", "P5\n32 x\n255\n");
    CHECK_THROWS_AS(dml::read_dataset(dir), dml::FormatError);
  }
  SUBCASE("missing manifest") {
    std::filesystem::remove(dir / "manifest.json");
    CHECK_THROWS(dml::read_dataset(dir));
  }
}

TEST_CASE("oracle annotator") {
  const WorldSpec spec = WorldSpec::defaults();
  const auto test = dml::generate(spec, Split::TestOod, 30);
  const auto shots = dml::oracle_annotate(test, 5, 5, "star");
  REQUIRE(shots.size() == 5);
  for (std::size_t q = 0; q < shots.size(); ++q) {
    const auto& a = shots[q];
    CHECK(a.shot_index == q);
    CHECK(a.class_name == "star");
    const auto& label = test[a.image.index].label;
    for (std::size_t p = 0; p < label.size(); ++p) {
      CHECK(a.mask.values[p] == (label.values[p] == 5 ? 1 : 0));
    }
  }
  // Three eligible scenes, five requested.
  std::vector<dml::SceneSample> few;
  for (const auto& s : test) {
    if (few.size() == 3) break;
    if (std::count(s.label.values.begin(), s.label.values.end(), 5)) few.push_back(s);
  }
  CHECK_THROWS(dml::oracle_annotate(few, 5, 5, "star"));
  CHECK_THROWS(dml::oracle_annotate(dml::generate(spec, Split::Val, 5), 5, 1, "star"));
}
