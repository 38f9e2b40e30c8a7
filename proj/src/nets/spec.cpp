#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "hseg/nets.hpp"

namespace hseg::nets {
namespace {

void append_conv_bn_relu(std::vector<LayerSpec>& layers, int k, int out, int dilation) {
  layers.push_back(LayerSpec::conv(k, out, dilation));
  layers.push_back(LayerSpec::batchnorm());
  layers.push_back(LayerSpec::relu());
}

// Output width of a layer chain entered with `in` channels; collect points
// are appended to `collected`.
int chain_channels(std::span<const LayerSpec> layers, int in, std::vector<int>* collected, const std::string& where) {
  int c = in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        if (l.dilation < 1) throw std::invalid_argument(where + ": dilation must be >= 1");
        if (l.kh < 1 || l.kw < 1 || l.kh % 2 == 0 || l.kw % 2 == 0) {
          throw std::invalid_argument(where + ": conv kernels must be odd-sized");
        }
        if (l.out_channels < 1) throw std::invalid_argument(where + ": conv needs out_channels >= 1");
        c = l.out_channels;
        break;
      case LayerKind::kDropout:
        if (!(l.dropout_rate >= 0.0 && l.dropout_rate < 1.0)) {
          throw std::invalid_argument(where + ": dropout rate must be in [0, 1)");
        }
        break;
      case LayerKind::kCollect:
        if (collected) collected->push_back(c);
        break;
      default:
        break;
    }
  }
  return c;
}

bool has_collect(const NetworkSpec& spec) {
  for (const auto& p : spec.pathways)
    for (const auto& l : p.layers)
      if (l.kind == LayerKind::kCollect) return true;
  return false;
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kSoftmax: return "softmax";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kCollect: return "collect";
  }
  return "?";
}

int NetworkSpec::conv_layer_count() const {
  int n = 0;
  for (const auto& p : pathways)
    n += static_cast<int>(std::count_if(p.layers.begin(), p.layers.end(),
                                        [](const LayerSpec& l) { return l.kind == LayerKind::kConv; }));
  n += static_cast<int>(
      std::count_if(head.begin(), head.end(), [](const LayerSpec& l) { return l.kind == LayerKind::kConv; }));
  return n;
}

int NetworkSpec::concat_channels() const {
  const bool collects = has_collect(*this);
  int total = 0;
  for (const auto& p : pathways) {
    std::vector<int> collected;
    const int out = chain_channels(p.layers, p.input_channels, &collected, name + "/" + p.name);
    if (collects) {
      for (int c : collected) total += c;
    } else {
      total += out;
    }
  }
  return total;
}

int NetworkSpec::output_channels() const { return chain_channels(head, concat_channels(), nullptr, name + "/head"); }

std::size_t NetworkSpec::layer_count() const {
  std::size_t n = head.size();
  for (const auto& p : pathways) n += p.layers.size();
  return n;
}

void NetworkSpec::validate() const {
  if (input_channels < 1) throw std::invalid_argument(name + ": input_channels must be >= 1");
  if (pathways.empty()) throw std::invalid_argument(name + ": no pathways");
  for (const auto& p : pathways) {
    if (p.input_offset < 0 || p.input_channels < 1 || p.input_offset + p.input_channels > input_channels) {
      throw std::invalid_argument(name + "/" + p.name + ": input channel range outside network input");
    }
  }
  const int out = output_channels();
  const std::vector<LayerSpec>& last_chain = head.empty() ? pathways.back().layers : head;
  if (last_chain.empty() || last_chain.back().kind != LayerKind::kSoftmax || out != 2) {
    throw std::invalid_argument(name + ": final layer must be a softmax over 2 classes");
  }
  if (head.empty() && (pathways.size() != 1 || has_collect(*this))) {
    throw std::invalid_argument(name + ": multi-pathway networks need a head");
  }
}

NetworkSpec build_liver_net() {
  NetworkSpec spec;
  spec.name = "liver";
  spec.input_channels = 6;
  PathwaySpec p{"dce", 0, 6, {}};
  for (int d : {1, 1, 2, 4, 8, 16, 1}) append_conv_bn_relu(p.layers, 3, 32, d);
  append_conv_bn_relu(p.layers, 1, 32, 1);
  p.layers.push_back(LayerSpec::dropout(0.5));
  p.layers.push_back(LayerSpec::conv(1, 2));
  p.layers.push_back(LayerSpec::softmax());
  spec.pathways.push_back(std::move(p));
  return spec;
}

PathwaySpec build_detect_pathway(std::string name, int input_offset, int input_channels) {
  PathwaySpec p{std::move(name), input_offset, input_channels, {}};
  constexpr int kBlockLayers[5] = {2, 2, 3, 3, 3};
  constexpr int kBlockDilation[5] = {1, 2, 4, 8, 8};
  for (int b = 0; b < 5; ++b) {
    for (int i = 0; i < kBlockLayers[b]; ++i) append_conv_bn_relu(p.layers, 3, 64, kBlockDilation[b]);
    p.layers.push_back(LayerSpec::collect());
  }
  return p;
}

namespace {
std::vector<LayerSpec> fusion_head() {
  std::vector<LayerSpec> head;
  head.push_back(LayerSpec::dropout(0.2));
  append_conv_bn_relu(head, 1, 128, 1);
  head.push_back(LayerSpec::dropout(0.2));
  head.push_back(LayerSpec::conv(1, 2));
  head.push_back(LayerSpec::softmax());
  return head;
}
}  // namespace

NetworkSpec build_dual_pathway_net() {
  NetworkSpec spec;
  spec.name = "dual";
  spec.input_channels = 9;
  spec.pathways.push_back(build_detect_pathway("dce", 0, 6));
  spec.pathways.push_back(build_detect_pathway("dw", 6, 3));
  spec.head = fusion_head();
  return spec;
}

NetworkSpec build_single_pathway_net(int in_channels) {
  if (in_channels != 6 && in_channels != 9) {
    throw std::invalid_argument("single pathway input must have 6 or 9 channels");
  }
  NetworkSpec spec;
  spec.name = in_channels == 6 ? "single-dce" : "single-concat";
  spec.input_channels = in_channels;
  spec.pathways.push_back(build_detect_pathway(in_channels == 6 ? "dce" : "dce+dw", 0, in_channels));
  spec.head = fusion_head();
  return spec;
}

DetectVariant parse_detect_variant(const std::string& s) {
  if (s == "dual") return DetectVariant::kDual;
  if (s == "single-dce" || s == "single6") return DetectVariant::kSingleDce;
  if (s == "single-concat" || s == "single9") return DetectVariant::kSingleConcat;
  throw std::invalid_argument("unknown detection variant '" + s + "' (dual|single-dce|single-concat)");
}

const char* to_string(DetectVariant v) {
  switch (v) {
    case DetectVariant::kDual: return "dual";
    case DetectVariant::kSingleDce: return "single-dce";
    case DetectVariant::kSingleConcat: return "single-concat";
  }
  return "?";
}

NetworkSpec build_detect_net(DetectVariant v) {
  switch (v) {
    case DetectVariant::kDual: return build_dual_pathway_net();
    case DetectVariant::kSingleDce: return build_single_pathway_net(6);
    case DetectVariant::kSingleConcat: return build_single_pathway_net(9);
  }
  throw std::invalid_argument("bad detection variant");
}

ReceptiveField receptive_field(std::span<const LayerSpec> layers) {
  ReceptiveField rf;
  for (const auto& l : layers) {
    if (l.kind != LayerKind::kConv) continue;
    rf.h += (l.kh - 1) * l.dilation;
    rf.w += (l.kw - 1) * l.dilation;
  }
  return rf;
}

ReceptiveField receptive_field(const PathwaySpec& pathway) {
  // Layers after the last collect point never reach the head.
  auto end = pathway.layers.end();
  for (auto it = pathway.layers.begin(); it != pathway.layers.end(); ++it)
    if (it->kind == LayerKind::kCollect) end = it + 1;
  return receptive_field(std::span<const LayerSpec>(pathway.layers.begin(), end));
}

ReceptiveField receptive_field(const NetworkSpec& spec) {
  ReceptiveField rf{1, 1};
  for (const auto& p : spec.pathways) {
    const auto r = receptive_field(p);
    rf.h = std::max(rf.h, r.h);
    rf.w = std::max(rf.w, r.w);
  }
  const auto head = receptive_field(std::span<const LayerSpec>(spec.head));
  return {rf.h + head.h - 1, rf.w + head.w - 1};
}

namespace {

void format_layers(std::ostringstream& out, const std::vector<LayerSpec>& layers) {
  for (const auto& l : layers) {
    out << to_string(l.kind);
    if (l.kind == LayerKind::kConv) {
      out << " k=" << l.kh << "x" << l.kw << " out=" << l.out_channels << " d=" << l.dilation;
    } else if (l.kind == LayerKind::kDropout) {
      out << " rate=" << l.dropout_rate;
    }
    out << '\n';
  }
}

// Reads "key=value" tokens following the keyword.
std::string field(const std::vector<std::string>& tokens, const std::string& key, int line_no) {
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (tokens[i].rfind(key + "=", 0) == 0) return tokens[i].substr(key.size() + 1);
  }
  throw std::invalid_argument("spec line " + std::to_string(line_no) + ": missing '" + key + "'");
}

}  // namespace

std::string format_spec(const NetworkSpec& spec) {
  std::ostringstream out;
  out << "network " << spec.name << " in=" << spec.input_channels << '\n';
  for (const auto& p : spec.pathways) {
    out << "pathway " << p.name << " offset=" << p.input_offset << " channels=" << p.input_channels << '\n';
    format_layers(out, p.layers);
  }
  if (!spec.head.empty()) {
    out << "head\n";
    format_layers(out, spec.head);
  }
  return out.str();
}

NetworkSpec parse_spec(const std::string& text) {
  NetworkSpec spec;
  std::vector<LayerSpec>* target = nullptr;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty() || tok[0][0] == '#') continue;
    const std::string& kw = tok[0];
    if (kw == "network") {
      if (tok.size() < 2) throw std::invalid_argument("spec line " + std::to_string(line_no) + ": missing name");
      spec.name = tok[1];
      spec.input_channels = std::stoi(field(tok, "in", line_no));
    } else if (kw == "pathway") {
      if (tok.size() < 2) throw std::invalid_argument("spec line " + std::to_string(line_no) + ": missing name");
      spec.pathways.push_back({tok[1], std::stoi(field(tok, "offset", line_no)),
                               std::stoi(field(tok, "channels", line_no)), {}});
      target = &spec.pathways.back().layers;
    } else if (kw == "head") {
      target = &spec.head;
    } else {
      if (!target) throw std::invalid_argument("spec line " + std::to_string(line_no) + ": layer outside a section");
      LayerSpec l;
      if (kw == "conv") {
        const std::string k = field(tok, "k", line_no);
        const auto x = k.find('x');
        if (x == std::string::npos) throw std::invalid_argument("spec line " + std::to_string(line_no) + ": bad k");
        l = LayerSpec::conv(std::stoi(k.substr(0, x)), std::stoi(field(tok, "out", line_no)),
                            std::stoi(field(tok, "d", line_no)));
        l.kw = std::stoi(k.substr(x + 1));
      } else if (kw == "batchnorm") {
        l = LayerSpec::batchnorm();
      } else if (kw == "relu") {
        l = LayerSpec::relu();
      } else if (kw == "softmax") {
        l = LayerSpec::softmax();
      } else if (kw == "dropout") {
        l = LayerSpec::dropout(std::stod(field(tok, "rate", line_no)));
      } else if (kw == "collect") {
        l = LayerSpec::collect();
      } else {
        throw std::invalid_argument("spec line " + std::to_string(line_no) + ": unknown layer '" + kw + "'");
      }
      target->push_back(l);
    }
  }
  spec.validate();
  return spec;
}

}  // namespace hseg::nets
