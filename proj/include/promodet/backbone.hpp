#pragma once

#include <array>
#include <string>
#include <vector>

#include "promodet/anchors.hpp"
#include "promodet/nn/layers.hpp"

namespace promodet {

enum class EncoderKind { kTiny, kVgg16Reduced };

struct BackboneConfig {
  EncoderKind encoder_kind = EncoderKind::kTiny;
  int input_size = 384;
  // Tiny encoder: channels of the first stage (stages use 1x, 2x, 4x, 4x, 4x).
  // Reduced VGG: divisor-free base width, 64 reproduces the usual widths.
  int encoder_width = 32;
  int decoder_width = 256;

  void validate() const {
    if (input_size <= 0 || input_size % 128 != 0) {
      throw ConfigError("backbone.input_size: must be a positive multiple of 128");
    }
    if (encoder_width < 4) throw ConfigError("backbone.encoder_width: must be >= 4");
    if (decoder_width < 1) throw ConfigError("backbone.decoder_width: must be >= 1");
  }
};

// Six decoder maps D1..D6, strides 8, 16, 32, 64, 128 and the extra level.
template <typename T>
struct PyramidFeatures {
  std::vector<nn::Var<T>> levels;
};

template <typename T>
class Encoder {
 public:
  Encoder(nn::ParamStore<T>& store, const BackboneConfig& cfg) : kind_(cfg.encoder_kind) {
    const int w = cfg.encoder_width;
    if (kind_ == EncoderKind::kTiny) {
      const int widths[5] = {w, 2 * w, 4 * w, 4 * w, 4 * w};
      stem_.emplace_back(store, "encoder.stem1", 3, std::max(4, w / 4), 3, 2);
      stem_.emplace_back(store, "encoder.stem2", std::max(4, w / 4), w / 2, 3, 2);
      int in = w / 2;
      for (int s = 0; s < 5; ++s) {
        const std::string name = "encoder.stage" + std::to_string(s + 1);
        stages_.push_back({nn::CbrBlock<T>(store, name + ".down", in, widths[s], 3, 2),
                           nn::CbrBlock<T>(store, name + ".conv", widths[s], widths[s], 3)});
        in = widths[s];
        out_channels_.push_back(widths[s]);
      }
    } else {
      build_vgg(store, w);
    }
  }

  const std::vector<int>& out_channels() const { return out_channels_; }

  // E1..E5 at strides 8..128 (ceil division for sizes that are not
  // multiples of 128).
  std::vector<nn::Var<T>> operator()(nn::Tape<T>& tape, const nn::Var<T>& image,
                                     bool training) const {
    return kind_ == EncoderKind::kTiny ? tiny_forward(tape, image, training)
                                       : vgg_forward(tape, image, training);
  }

 private:
  std::vector<nn::Var<T>> tiny_forward(nn::Tape<T>& tape, const nn::Var<T>& image,
                                       bool training) const {
    auto x = image;
    for (const auto& b : stem_) x = b(tape, x, training);
    std::vector<nn::Var<T>> maps;
    for (const auto& st : stages_) {
      x = st[0](tape, x, training);
      x = st[1](tape, x, training);
      maps.push_back(x);
    }
    return maps;
  }

  void build_vgg(nn::ParamStore<T>& store, int base) {
    auto ch = [base](int c) { return std::max(1, c * base / 64); };
    const std::vector<std::vector<int>> blocks{{64, 64}, {128, 128}, {256, 256, 256},
                                               {512, 512, 512}, {512, 512, 512}};
    int in = 3;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (std::size_t i = 0; i < blocks[b].size(); ++i) {
        const std::string name =
            "encoder.stage" + std::to_string(b < 4 ? 1 : 2) + ".conv" + std::to_string(b + 1) +
            "_" + std::to_string(i + 1);
        vgg_.emplace_back(store, name, in, ch(blocks[b][i]), 3);
        in = ch(blocks[b][i]);
      }
    }
    vgg_fc6_ = nn::CbrBlock<T>(store, "encoder.stage2.conv6", in, ch(1024), 3, 1, 6, 6);
    vgg_fc7_ = nn::CbrBlock<T>(store, "encoder.stage2.conv7", ch(1024), ch(1024), 1);
    out_channels_ = {ch(512), ch(1024)};
    const int extra[3][2] = {{256, 512}, {128, 256}, {128, 256}};
    in = ch(1024);
    for (int e = 0; e < 3; ++e) {
      const std::string name = "encoder.stage" + std::to_string(e + 3);
      vgg_extra_.push_back({nn::CbrBlock<T>(store, name + ".reduce", in, ch(extra[e][0]), 1),
                            nn::CbrBlock<T>(store, name + ".down", ch(extra[e][0]),
                                            ch(extra[e][1]), 3, 2)});
      in = ch(extra[e][1]);
      out_channels_.push_back(in);
    }
  }

  std::vector<nn::Var<T>> vgg_forward(nn::Tape<T>& tape, const nn::Var<T>& image,
                                      bool training) const {
    std::vector<nn::Var<T>> maps;
    auto x = image;
    std::size_t layer = 0;
    const int per_block[5] = {2, 2, 3, 3, 3};
    for (int b = 0; b < 5; ++b) {
      if (b > 0) x = nn::max_pool2d(tape, x, 2, 2, 0, true);
      for (int i = 0; i < per_block[b]; ++i) x = vgg_[layer++](tape, x, training);
      if (b == 3) maps.push_back(x);  // conv4_3, stride 8
    }
    x = nn::max_pool2d(tape, x, 3, 1, 1);
    x = vgg_fc6_(tape, x, training);
    x = vgg_fc7_(tape, x, training);
    maps.push_back(x);  // conv7, stride 16
    for (const auto& e : vgg_extra_) {
      x = e[1](tape, e[0](tape, x, training), training);
      maps.push_back(x);
    }
    return maps;
  }

  EncoderKind kind_;
  std::vector<nn::CbrBlock<T>> stem_;
  std::vector<std::array<nn::CbrBlock<T>, 2>> stages_;
  std::vector<nn::CbrBlock<T>> vgg_;
  nn::CbrBlock<T> vgg_fc6_, vgg_fc7_;
  std::vector<std::array<nn::CbrBlock<T>, 2>> vgg_extra_;
  std::vector<int> out_channels_;
};

// Top-down decoder: D5 = CBR1(E5); Dk = CBR1(Ek) + CBR1(up2x(Dk+1));
// D6 is a strided 3x3 CBR of D5; every Dk then runs through a CBR3 block.
template <typename T>
class Decoder {
 public:
  Decoder(nn::ParamStore<T>& store, const std::vector<int>& encoder_channels, int width)
      : width_(width) {
    for (int k = 0; k < 5; ++k) {
      lateral_.emplace_back(store, "decoder.lateral" + std::to_string(k + 1),
                            encoder_channels[k], width, 1);
    }
    for (int k = 0; k < 4; ++k) {
      topdown_.emplace_back(store, "decoder.topdown" + std::to_string(k + 1), width, width, 1);
    }
    d6_weights_ = nn::CbrBlock<T>(store, "decoder.extra6", width, width, 3);
    for (int k = 0; k < 6; ++k) {
      enhance_.emplace_back(store, "decoder.enhance" + std::to_string(k + 1), width, width, 3);
    }
  }

  int width() const { return width_; }

  PyramidFeatures<T> operator()(nn::Tape<T>& tape, const std::vector<nn::Var<T>>& enc,
                                bool training) const {
    if (enc.size() != 5) throw ShapeError("decode_pyramid: expected 5 encoder maps");
    std::vector<nn::Var<T>> raw(6);
    raw[4] = lateral_[4](tape, enc[4], training);
    for (int k = 3; k >= 0; --k) {
      const auto& skip = enc[k]->value.shape();
      const auto& coarse = raw[k + 1]->value.shape();
      if (coarse.h != (skip.h + 1) / 2 || coarse.w != (skip.w + 1) / 2) {
        throw ShapeError("decode_pyramid: stride mismatch between level " + std::to_string(k + 1) +
                         " skip " + skip.str() + " and upsampled " + coarse.str());
      }
      auto up = nn::upsample_bilinear(tape, raw[k + 1], skip.h, skip.w);
      raw[k] = nn::add(tape, lateral_[k](tape, enc[k], training), topdown_[k](tape, up, training));
    }
    raw[5] = extra_level(tape, raw[4], training);
    PyramidFeatures<T> out;
    for (int k = 0; k < 6; ++k) out.levels.push_back(enhance_[k](tape, raw[k], training));
    return out;
  }

 private:
  // Even sizes halve with stride 2; odd sizes collapse to 1x1.
  nn::Var<T> extra_level(nn::Tape<T>& tape, const nn::Var<T>& d5, bool training) const {
    const int size = d5->value.h();
    nn::CbrBlock<T> blk = d6_weights_;
    if (size % 2 == 0) {
      blk.conv.stride = 2;
      blk.conv.pad = 1;
    } else {
      blk.conv.stride = size;
      blk.conv.pad = size == 1 ? 1 : 0;
    }
    return blk(tape, d5, training);
  }

  int width_;
  std::vector<nn::CbrBlock<T>> lateral_;
  std::vector<nn::CbrBlock<T>> topdown_;
  nn::CbrBlock<T> d6_weights_;
  std::vector<nn::CbrBlock<T>> enhance_;
};

template <typename T>
class Backbone {
 public:
  Backbone(nn::ParamStore<T>& store, const BackboneConfig& cfg)
      : encoder_(store, cfg), decoder_(store, encoder_.out_channels(), cfg.decoder_width) {}

  PyramidFeatures<T> operator()(nn::Tape<T>& tape, const nn::Var<T>& image, bool training) const {
    return decoder_(tape, encoder_(tape, image, training), training);
  }

  const Encoder<T>& encoder() const { return encoder_; }
  const Decoder<T>& decoder() const { return decoder_; }
  int width() const { return decoder_.width(); }

 private:
  Encoder<T> encoder_;
  Decoder<T> decoder_;
};

}  // namespace promodet
