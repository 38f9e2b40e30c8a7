#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "hseg/nets.hpp"

using namespace hseg;
using namespace hseg::nets;
using hseg::nn::Shape4;
using hseg::nn::Tensor;

namespace {

Tensor random_input(Shape4 s, Rng& rng) {
  Tensor t(s);
  for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

std::size_t first_head_conv(const NetworkSpec& spec) {
  std::size_t g = 0;
  for (const auto& p : spec.pathways) g += p.layers.size();
  while (spec.head[g - (spec.layer_count() - spec.head.size())].kind != LayerKind::kConv) ++g;
  return g;
}

// Bounding box of output pixels that change when one input pixel changes.
struct Box {
  int y0 = 1 << 30, y1 = -1, x0 = 1 << 30, x1 = -1;
};

Box impulse_box(const Network& net, Shape4 s, int channel, Rng& rng) {
  Tensor base = random_input(s, rng);
  Tensor poked = base;
  poked.at(0, s.h / 2, s.w / 2, channel) += 5.0f;
  const Tensor a = net.infer(base), b = net.infer(poked);
  Box box;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      if (a.at(0, y, x, 1) != b.at(0, y, x, 1)) {
        box.y0 = std::min(box.y0, y);
        box.y1 = std::max(box.y1, y);
        box.x0 = std::min(box.x0, x);
        box.x1 = std::max(box.x1, x);
      }
  return box;
}

// Tiny two-pathway network exercising collect, concat, dropout and both heads.
NetworkSpec tiny_dual() {
  NetworkSpec s;
  s.name = "tiny";
  s.input_channels = 3;
  PathwaySpec a{"a", 0, 2, {}};
  a.layers = {LayerSpec::conv(3, 3, 1), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::collect(),
              LayerSpec::conv(3, 2, 2), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::collect()};
  PathwaySpec b{"b", 2, 1, {}};
  b.layers = {LayerSpec::conv(3, 2, 1), LayerSpec::relu(), LayerSpec::collect()};
  s.pathways = {a, b};
  s.head = {LayerSpec::dropout(0.2), LayerSpec::conv(1, 4), LayerSpec::batchnorm(), LayerSpec::relu(),
            LayerSpec::dropout(0.2), LayerSpec::conv(1, 2), LayerSpec::softmax()};
  return s;
}

}  // namespace

TEST_CASE("liver network architecture") {
  const NetworkSpec s = build_liver_net();
  s.validate();
  CHECK(receptive_field(s) == ReceptiveField{67, 67});
  CHECK(s.conv_layer_count() == 9);
  CHECK(s.input_channels == 6);
  CHECK(s.output_channels() == 2);
  std::vector<int> dil;
  for (const auto& l : s.pathways[0].layers)
    if (l.kind == LayerKind::kConv && l.kh == 3) dil.push_back(l.dilation);
  CHECK(dil == std::vector<int>{1, 1, 2, 4, 8, 16, 1});
  int sum = 0;
  for (int d : dil) sum += d;
  CHECK(1 + 2 * sum == 67);
  int dropouts = 0;
  for (const auto& l : s.head)
    if (l.kind == LayerKind::kDropout) {
      ++dropouts;
      CHECK(l.dropout_rate == 0.5);
    }
  for (const auto& l : s.pathways[0].layers)
    if (l.kind == LayerKind::kDropout) {
      ++dropouts;
      CHECK(l.dropout_rate == 0.5);
    }
  CHECK(dropouts == 1);
}

TEST_CASE("detection network architectures") {
  const NetworkSpec dual = build_dual_pathway_net();
  dual.validate();
  CHECK(dual.concat_channels() == 640);
  CHECK(dual.input_channels == 9);
  REQUIRE(dual.pathways.size() == 2);
  CHECK(dual.pathways[0].input_channels == 6);
  CHECK(dual.pathways[1].input_offset == 6);
  CHECK(dual.pathways[1].input_channels == 3);
  for (const auto& p : dual.pathways) {
    CHECK(std::count_if(p.layers.begin(), p.layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::kConv; }) == 13);
    CHECK(receptive_field(p) == ReceptiveField{133, 133});
  }
  CHECK(receptive_field(dual) == ReceptiveField{133, 133});

  for (int c : {6, 9}) {
    const NetworkSpec single = build_single_pathway_net(c);
    single.validate();
    CHECK(single.concat_channels() == 320);
    CHECK(single.input_channels == c);
    CHECK(single.conv_layer_count() == 13 + 2);
  }
  CHECK_THROWS_AS(build_single_pathway_net(3), std::invalid_argument);

  // Head: dropout 0.2, 1x1x128 (BN, ReLU), dropout 0.2, 1x1x2, softmax.
  const auto& h = dual.head;
  REQUIRE(h.size() == 7);
  CHECK(h[0] == LayerSpec::dropout(0.2));
  CHECK(h[1] == LayerSpec::conv(1, 128));
  CHECK(h[4] == LayerSpec::dropout(0.2));
  CHECK(h[5] == LayerSpec::conv(1, 2));
  CHECK(h[6] == LayerSpec::softmax());

  CHECK(parse_detect_variant("dual") == DetectVariant::kDual);
  CHECK(parse_detect_variant("single-dce") == DetectVariant::kSingleDce);
  CHECK(parse_detect_variant("single9") == DetectVariant::kSingleConcat);
  CHECK_THROWS_AS(parse_detect_variant("triple"), std::invalid_argument);
}

TEST_CASE("receptive field formula") {
  const std::vector<LayerSpec> one{LayerSpec::conv(3, 4, 1)};
  CHECK(receptive_field(one) == ReceptiveField{3, 3});
  const std::vector<LayerSpec> two{LayerSpec::conv(3, 4, 1), LayerSpec::conv(3, 4, 2)};
  CHECK(receptive_field(two) == ReceptiveField{7, 7});
  const std::vector<LayerSpec> pointwise{LayerSpec::conv(1, 4), LayerSpec::relu()};
  CHECK(receptive_field(pointwise) == ReceptiveField{1, 1});
}

TEST_CASE("impulse response stays inside the receptive field") {
  Rng rng(1);
  SUBCASE("two-layer stack") {
    NetworkSpec s;
    s.name = "rf7";
    s.input_channels = 1;
    s.pathways = {{"p", 0, 1, {LayerSpec::conv(3, 4, 1), LayerSpec::conv(3, 4, 2), LayerSpec::conv(1, 2), LayerSpec::softmax()}}};
    const Network net(s, init_params(s, Initializer::kGlorotUniform, rng));
    const Box b = impulse_box(net, {1, 21, 21, 1}, 0, rng);
    CHECK(b.y0 == 10 - 3);
    CHECK(b.y1 == 10 + 3);
    CHECK(b.x0 == 10 - 3);
    CHECK(b.x1 == 10 + 3);
  }
  SUBCASE("liver net") {
    const NetworkSpec s = build_liver_net();
    const Network net(s, init_params(s, Initializer::kGlorotUniform, rng));
    const Box b = impulse_box(net, {1, 81, 81, 6}, 2, rng);
    CHECK(b.y0 >= 40 - 33);
    CHECK(b.y1 <= 40 + 33);
    CHECK(b.x0 >= 40 - 33);
    CHECK(b.x1 <= 40 + 33);
    CHECK(b.y1 - b.y0 + 1 == 67);
  }
  SUBCASE("both detection pathways") {
    const NetworkSpec s = build_dual_pathway_net();
    const Network net(s, init_params(s, Initializer::kHeUniform, rng));
    for (int ch : {1, 7}) {
      const Box b = impulse_box(net, {1, 141, 141, 9}, ch, rng);
      CHECK(b.y0 >= 70 - 66);
      CHECK(b.y1 <= 70 + 66);
      CHECK(b.x0 >= 70 - 66);
      CHECK(b.x1 <= 70 + 66);
      CHECK(b.x1 - b.x0 + 1 == 133);
    }
  }
}

TEST_CASE("pathways do not interact before the concatenation") {
  Rng rng(2);
  const NetworkSpec s = build_dual_pathway_net();
  ParamStore p = init_params(s, Initializer::kHeUniform, rng);
  // Zero the head's weights reading the DW half (channels 320..639).
  auto& head = *p.layers[first_head_conv(s)].conv;
  REQUIRE(head.in_channels == 640);
  for (int c = 320; c < 640; ++c)
    for (int o = 0; o < head.out_channels; ++o) head.w(0, 0, c, o) = 0.0f;
  const Network net(s, std::move(p));
  Tensor x = random_input({1, 24, 24, 9}, rng);
  const Tensor a = net.infer(x);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (i % 9 >= 6) x.vec()[i] = 0.0f;
  CHECK(net.infer(x) == a);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (i % 9 >= 6) x.vec()[i] = static_cast<float>(rng.uniform(-3, 3));
  CHECK(net.infer(x) == a);
}

TEST_CASE("dual pathway has about twice the pathway parameters") {
  Rng rng(3);
  const NetworkSpec dual = build_dual_pathway_net(), single = build_single_pathway_net(6);
  const ParamStore pd = init_params(dual, Initializer::kHeUniform, rng);
  const ParamStore ps = init_params(single, Initializer::kHeUniform, rng);
  const double body_dual = double(pathway_parameter_count(dual, 0, pd) + pathway_parameter_count(dual, 1, pd));
  const double body_single = double(pathway_parameter_count(single, 0, ps));
  const double ratio = body_dual / body_single;
  CHECK(ratio >= 1.8);
  CHECK(ratio <= 2.2);
  CHECK(pd.parameter_count() > ps.parameter_count());
}

TEST_CASE("initializers respect their limits") {
  Rng rng(4);
  const NetworkSpec s = build_liver_net();
  const ParamStore p = init_params(s, Initializer::kGlorotUniform, rng);
  for (const auto& l : p.layers) {
    if (!l.conv) continue;
    const auto& c = *l.conv;
    const double lim = std::sqrt(6.0 / double(c.kh * c.kw * (c.in_channels + c.out_channels)));
    for (float w : c.weights) CHECK(std::abs(w) <= lim);
    for (float b : c.bias) CHECK(b == 0.0f);
  }
}

TEST_CASE("spec text roundtrip") {
  for (const auto& s : {build_liver_net(), build_dual_pathway_net(), build_single_pathway_net(9), tiny_dual()}) {
    const std::string text = format_spec(s);
    CHECK(parse_spec(text) == s);
    CHECK(std::count(text.begin(), text.end(), '\n') >= int(s.layer_count()));
  }
  CHECK_THROWS_AS(parse_spec("layer conv\n"), std::invalid_argument);
}

TEST_CASE("network backward matches finite differences") {
  Rng rng(5);
  const NetworkSpec s = tiny_dual();
  s.validate();
  Network net(s, init_params(s, Initializer::kHeUniform, rng));
  const Tensor x = random_input({2, 5, 6, 3}, rng);
  Tensor r({2, 5, 6, 2});
  for (auto& v : r.vec()) v = static_cast<float>(rng.uniform(-1, 1));

  auto loss = [&] {
    Rng drop(99);
    const Tensor p = net.forward(x, nn::Mode::kTrain, &drop);
    double l = 0;
    for (std::size_t i = 0; i < p.size(); ++i) l += double(p.vec()[i]) * r.vec()[i];
    return l;
  };
  loss();
  const auto grads = net.backward(r);
  auto params = net.params().trainable();
  REQUIRE(grads.size() == params.size());
  // ReLU kinks sit within a step of some coordinates. A kink shows up as
  // differing one-sided slopes; there the analytic value must match the
  // clean side, elsewhere it must match the central difference.
  const float h = 1e-3f;
  std::size_t total = 0, kinks = 0, bad = 0;
  const double f0 = loss();
  for (std::size_t k = 0; k < params.size(); ++k) {
    REQUIRE(grads[k].size() == params[k].size());
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const float keep = params[k][i];
      params[k][i] = keep + h;
      const double fp = loss();
      params[k][i] = keep - h;
      const double fm = loss();
      params[k][i] = keep;
      const double a = grads[k][i];
      const double central = (fp - fm) / (2.0 * h), right = (fp - f0) / h, left = (f0 - fm) / h;
      const double tol = 2e-3 + 1e-2 * std::abs(a);
      const bool kink = std::abs(right - left) > tol;
      ++total;
      if (kink) ++kinks;
      const bool ok = std::abs(a - central) < tol ||
                      (kink && std::min(std::abs(a - left), std::abs(a - right)) < tol);
      if (!ok) {
        ++bad;
        MESSAGE("slot " << k << " index " << i << ": analytic " << a << " central " << central << " left " << left
                        << " right " << right);
      }
    }
  }
  CHECK(bad == 0);
  // Most coordinates must still be checked against the central difference.
  CHECK(kinks * 3 <= total);
  CHECK(net.last_input_shape() == x.shape());
}

TEST_CASE("forward_volume") {
  Rng rng(6);
  const NetworkSpec s = build_liver_net();
  ParamStore p = init_params(s, Initializer::kGlorotUniform, rng);
  Volume v({20, 16, 5}, 6, {1.5f, 1.5f, 2.0f});
  for (auto& x : v.data()) x = static_cast<float>(rng.normal());

  {
    const Network net(s, p);
    const Volume out = forward_volume(net, v, 2, 1);
    CHECK(out.channels() == 1);
    CHECK(out.same_geometry(v));
    for (float x : out.data()) CHECK((x >= 0.0f && x <= 1.0f));
    CHECK(forward_volume(net, v, 3, 3) == out);
    // Slice by slice against a direct single-slice forward.
    for (int z = 0; z < 5; ++z) {
      const auto sl = extract_slice(v, z);
      const Tensor probs = net.infer(Tensor({1, 16, 20, 6}, sl.data));
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 20; ++x) CHECK(out.at(x, y, z) == probs.at(0, y, x, 1));
    }
    CHECK_THROWS_AS(forward_volume(net, v.select_channels(0, 3)), std::invalid_argument);
  }

  // Zero final layer: equal logits everywhere.
  auto& last = p.layers[s.layer_count() - 2];
  REQUIRE(last.conv);
  std::fill(last.conv->weights.begin(), last.conv->weights.end(), 0.0f);
  std::fill(last.conv->bias.begin(), last.conv->bias.end(), 0.0f);
  const Network flat(s, p);
  const Volume half = forward_volume(flat, v);
  for (float x : half.data()) CHECK(x == 0.5f);
}

TEST_CASE("checkpoint roundtrip and validation") {
  Rng rng(7);
  const NetworkSpec s = tiny_dual();
  Network net(s, init_params(s, Initializer::kHeUniform, rng));
  // Move the running stats away from their initial values.
  Rng drop(1);
  net.forward(random_input({2, 6, 6, 3}, rng), nn::Mode::kTrain, &drop);

  const auto bytes = encode_checkpoint(net.params());
  const Checkpoint back = decode_checkpoint(bytes, s);
  CHECK(back.params == net.params());
  CHECK_FALSE(back.optimizer.has_value());

  nn::AdamState st;
  st.step = 3;
  st.config.learning_rate = 1e-4;
  for (const auto& t : net.params().trainable()) {
    st.m.emplace_back(t.size(), 0.25f);
    st.v.emplace_back(t.size(), 0.5f);
  }
  const auto dir = std::filesystem::temp_directory_path() / "hseg_test_nets";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "w.hwgt", net.params(), &st);
  const Checkpoint c = load_checkpoint(dir / "w.hwgt", s);
  CHECK(c.params == net.params());
  REQUIRE(c.optimizer.has_value());
  CHECK(c.optimizer->step == 3);
  CHECK(c.optimizer->config.learning_rate == 1e-4);
  CHECK(c.optimizer->m == st.m);
  CHECK(c.optimizer->v == st.v);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad, s), DataError);
  auto cut = bytes;
  cut.resize(cut.size() - 7);
  CHECK_THROWS_AS(decode_checkpoint(cut, s), DataError);
  auto extra = bytes;
  extra.push_back(1);
  CHECK_THROWS_AS(decode_checkpoint(extra, s), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes, build_liver_net()), DataError);
}

TEST_CASE("train-mode forward is deterministic for a fixed stream") {
  Rng rng(8);
  const NetworkSpec s = tiny_dual();
  Network a(s, init_params(s, Initializer::kHeUniform, rng));
  Network b = a;
  const Tensor x = random_input({2, 5, 5, 3}, rng);
  Rng ra(42), rb(42);
  CHECK(a.forward(x, nn::Mode::kTrain, &ra) == b.forward(x, nn::Mode::kTrain, &rb));
  CHECK(a.params() == b.params());
  CHECK_THROWS_AS(a.forward(x, nn::Mode::kTrain), std::invalid_argument);
}
