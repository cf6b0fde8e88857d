#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace edgeseg;
using testsupport::TempDir;

namespace {

constexpr ImageSize kSize{32, 32};

struct Fixture {
  TempDir tmp;
  SourceCorpus corpus;
  TrainingData data;
  ArchConfig arch{1, {4, 8}, 16};

  Fixture() {
    corpus.seed = 5;
    corpus.unlabelled_fraction_used = 1.0;
    corpus.datasets.push_back({tmp.path() / "a", testsupport::make_dataset(tmp.path() / "a", "source", 16, 1, kSize, 0.25)});
    corpus.datasets.push_back(
        {tmp.path() / "b", testsupport::make_dataset(tmp.path() / "b", "source-alt", 16, 2, kSize, 0.25)});
    const CannyConfig canny;
    data = load_training_data(corpus, kSize, &canny, tmp.path() / "cache");
  }

  TrainConfig config(Method m, int epochs = 3) const {
    TrainConfig c;
    c.method = m;
    c.unlabelled_fraction = m == Method::supervised ? 0.0 : 1.0;
    c.epochs = epochs;
    c.batch_size = 4;
    c.learning_rate = 3e-3;
    c.seed = 17;
    return c;
  }
};

double mean_of(const std::vector<EpochRecord>& h, std::size_t from, std::size_t to, bool supervised) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += supervised ? h[i].supervised_loss : h[i].self_supervised_loss;
  return s / static_cast<double>(to - from);
}

bool same_group(const ModelParameters& a, const ModelParameters& b, const std::string& prefix) {
  const auto na = named_parameters(a), nb = named_parameters(b);
  for (std::size_t i = 0; i < na.size(); ++i)
    if (na[i].first.starts_with(prefix) && *na[i].second != *nb[i].second) return false;
  return true;
}

}  // namespace

TEST_CASE("method names and config validation") {
  for (const auto& name : method_names()) CHECK(to_string(parse_method(name)) == name);
  CHECK(parse_method("rotation_pretrain") == Method::rotation_pretrain);
  CHECK_THROWS_AS(parse_method("simclr"), ConfigError);
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.unlabelled_fraction = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.unlabelled_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.method = Method::supervised;
  CHECK_NOTHROW(c.validate());
  c.unlabelled_fraction = 0.3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(TrainConfig::from_json_string(TrainConfig{}.to_json_string()).to_json_string() == TrainConfig{}.to_json_string());
}

TEST_CASE("training data carries masks and cached edge targets") {
  Fixture f;
  CHECK(f.data.labelled.size() == 8);
  CHECK(f.data.unlabelled.size() == 24);
  for (const auto& s : f.data.labelled) CHECK(s.mask);
  for (const auto& s : f.data.unlabelled) {
    REQUIRE(s.edge_target);
    CHECK(*s.edge_target == canny_edges(s.image).values);
  }
}

TEST_CASE("joint training: history, descent, determinism") {
  Fixture f;
  const TrainConfig c = f.config(Method::edge_joint, 12);
  const TrainResult a = joint_train(init_model(f.arch, 1), f.data, c);
  REQUIRE(a.history.epochs.size() == 12);
  for (const auto& e : a.history.epochs) {
    CHECK(std::isfinite(e.supervised_loss));
    CHECK(std::isfinite(e.self_supervised_loss));
    CHECK(e.wall_time >= 0.0);
  }
  CHECK(mean_of(a.history.epochs, 7, 12, true) < mean_of(a.history.epochs, 0, 5, true));
  const TrainResult b = joint_train(init_model(f.arch, 1), f.data, c);
  CHECK(parameter_checksum(a.params) == parameter_checksum(b.params));
  for (std::size_t i = 0; i < a.history.epochs.size(); ++i)
    CHECK(a.history.epochs[i].supervised_loss == b.history.epochs[i].supervised_loss);
  const std::string csv = a.history.to_csv();
  CHECK(csv.rfind("epoch,L_S,L_SS,wall_time\n", 0) == 0);

  TrainConfig summed = c;
  summed.summed_objective = true;
  summed.epochs = 2;
  CHECK(joint_train(init_model(f.arch, 1), f.data, summed).params.all_finite());
}

TEST_CASE("joint training rejects empty pools") {
  Fixture f;
  TrainingData no_unlabelled{f.data.labelled, {}};
  CHECK_THROWS_AS(joint_train(init_model(f.arch, 1), no_unlabelled, f.config(Method::edge_joint)), Error);
  TrainingData no_labelled{{}, f.data.unlabelled};
  CHECK_THROWS_AS(joint_train(init_model(f.arch, 1), no_labelled, f.config(Method::edge_joint)), Error);
}

TEST_CASE("optimizer partition: each step leaves the other decoder bitwise unchanged") {
  Fixture f;
  const TrainConfig c = f.config(Method::edge_joint);
  ModelParameters p = init_model(f.arch, 2);
  std::vector<Image> imgs;
  std::vector<BinaryMap> edges, masks;
  std::vector<Image> limgs;
  for (int i = 0; i < 4; ++i) {
    imgs.push_back(f.data.unlabelled[i].image);
    edges.push_back(*f.data.unlabelled[i].edge_target);
    limgs.push_back(f.data.labelled[i].image);
    masks.push_back(*f.data.labelled[i].mask);
  }
  Adam seg(c.learning_rate, kSegmentationGroup), edge(c.learning_rate, kEdgeGroup);
  const ModelParameters before = p;
  bce_step(p, edge, DecoderHead::edge, imgs, edges, c);
  CHECK(same_group(p, before, "seg_decoder."));
  CHECK(!same_group(p, before, "encoder."));
  CHECK(!same_group(p, before, "edge_decoder."));
  const ModelParameters mid = p;
  bce_step(p, seg, DecoderHead::segmentation, limgs, masks, c);
  CHECK(same_group(p, mid, "edge_decoder."));
  CHECK(!same_group(p, mid, "encoder."));
  CHECK(!same_group(p, mid, "seg_decoder."));
}

TEST_CASE("supervised training: descent, determinism, fraction contract, frozen encoder") {
  Fixture f;
  const TrainConfig c = f.config(Method::supervised, 12);
  const TrainResult a = train_supervised(init_model(f.arch, 3), f.data.labelled, c);
  CHECK(a.history.epochs.size() == 12);
  CHECK(mean_of(a.history.epochs, 7, 12, true) < mean_of(a.history.epochs, 0, 5, true));
  CHECK(parameter_checksum(a.params) ==
        parameter_checksum(train_supervised(init_model(f.arch, 3), f.data.labelled, c).params));
  for (const auto& e : a.history.epochs) CHECK(e.self_supervised_loss == 0.0);

  TrainConfig wrong = c;
  wrong.unlabelled_fraction = 0.6;
  CHECK_THROWS_AS(train_supervised(init_model(f.arch, 3), f.data.labelled, wrong), ConfigError);

  TrainConfig frozen = c;
  frozen.epochs = 2;
  frozen.freeze_encoder = true;
  const ModelParameters start = init_model(f.arch, 3);
  const ModelParameters out = train_supervised(start, f.data.labelled, frozen).params;
  CHECK(same_group(out, start, "encoder."));
  CHECK(!same_group(out, start, "seg_decoder."));
}

TEST_CASE("regularized training: zero weight reproduces supervised; entropy decreases") {
  Fixture f;
  TrainConfig c = f.config(Method::entropy, 4);
  c.reg_weight = 0.0;
  TrainConfig sup = f.config(Method::supervised, 4);
  const auto base = train_supervised(init_model(f.arch, 4), f.data.labelled, sup);
  for (Regularizer r : {Regularizer::entropy, Regularizer::consistency}) {
    c.method = r == Regularizer::entropy ? Method::entropy : Method::consistency;
    const auto reg = train_with_regularizer(init_model(f.arch, 4), f.data, c, r);
    CHECK(parameter_checksum(reg.params) == parameter_checksum(base.params));
    for (std::size_t i = 0; i < base.history.epochs.size(); ++i)
      CHECK(reg.history.epochs[i].supervised_loss == base.history.epochs[i].supervised_loss);
  }

  TrainConfig ent = f.config(Method::entropy, 12);
  const auto run = train_with_regularizer(init_model(f.arch, 4), f.data, ent, Regularizer::entropy);
  CHECK(mean_of(run.history.epochs, 7, 12, false) < mean_of(run.history.epochs, 0, 5, false));
  CHECK(parameter_checksum(run.params) ==
        parameter_checksum(train_with_regularizer(init_model(f.arch, 4), f.data, ent, Regularizer::entropy).params));

  TrainConfig cons = f.config(Method::consistency, 2);
  const auto cr = train_with_regularizer(init_model(f.arch, 4), f.data, cons, Regularizer::consistency);
  for (const auto& e : cr.history.epochs) CHECK(std::isfinite(e.self_supervised_loss));
}

TEST_CASE("rotation labels are uniform") {
  std::mt19937_64 rng(8);
  const auto labels = sample_rotation_labels(rng, 10000);
  std::array<int, 4> counts{};
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  const double sigma = std::sqrt(10000 * 0.25 * 0.75);
  for (int c : counts) CHECK(std::abs(c - 2500) < 4 * sigma);
}

TEST_CASE("rotation pretraining beats chance on held-out images and is deterministic") {
  TempDir tmp;
  const ImageSize size{16, 16};
  testsupport::make_dataset(tmp.path() / "r", "source", 48, 3, size, 1.0);
  std::vector<std::pair<fs::path, std::string>> refs;
  for (const auto& id : list_image_ids(tmp.path() / "r")) refs.emplace_back(tmp.path() / "r", id);
  auto all = load_samples(refs, SampleRole::unlabelled, size);
  // a gradient makes the orientation learnable on top of the cells
  for (auto& s : all)
    for (int r = 0; r < size.rows; ++r)
      for (int c = 0; c < size.cols; ++c) s.image(r, c) = 0.5 * s.image(r, c) + 0.5 * r / size.rows;
  const std::vector<Sample> train(all.begin(), all.begin() + 36), held(all.begin() + 36, all.end());

  TrainConfig c;
  c.method = Method::rotation_pretrain;
  c.unlabelled_fraction = 1.0;
  c.epochs = 30;
  c.batch_size = 8;
  c.seed = 2;
  const ArchConfig arch{1, {4, 8}, 16};
  std::vector<double> losses;
  const ModelParameters p = pretrain_rotation(init_model(arch, 6, true), train, c, &losses);
  CHECK(losses.size() == 30);
  CHECK(parameter_checksum(p) == parameter_checksum(pretrain_rotation(init_model(arch, 6, true), train, c)));

  int correct = 0, total = 0;
  for (const auto& s : held)
    for (int k = 0; k < 4; ++k) {
      const std::vector<Image> one{rotate90(s.image, k)};
      const auto probs = forward_rotation(p, one)[0];
      correct += static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin()) == k;
      ++total;
    }
  CHECK(static_cast<double>(correct) / total > 0.25);
  CHECK_THROWS_AS(pretrain_rotation(init_model(arch, 6, false), train, c), Error);
}

TEST_CASE("fine-tuning lowers the support loss and leaves the edge decoder alone") {
  Fixture f;
  const ModelParameters base = init_model(f.arch, 9);
  FinetuneConfig fc;
  fc.epochs = 10;
  fc.seed = 3;
  const std::vector<Sample> support(f.data.labelled.begin(), f.data.labelled.begin() + 5);
  const ModelParameters tuned = finetune(base, support, fc);
  CHECK(segmentation_loss(tuned, support) < segmentation_loss(base, support));
  CHECK(same_group(tuned, base, "edge_decoder."));
  CHECK(parameter_checksum(tuned) == parameter_checksum(finetune(base, support, fc)));

  const std::vector<Sample> one(f.data.labelled.begin(), f.data.labelled.begin() + 1);
  CHECK(finetune(base, one, fc).all_finite());
  CHECK_THROWS_AS(finetune(base, {}, fc), Error);
}

TEST_CASE("non-finite losses abort with the batch ids") {
  Fixture f;
  TrainingData bad = f.data;
  for (auto& s : bad.labelled) s.image.data[0] = std::nan("");
  try {
    joint_train(init_model(f.arch, 1), bad, f.config(Method::edge_joint, 1));
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find(bad.labelled.front().id) != std::string::npos);
  }
}
