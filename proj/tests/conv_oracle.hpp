#pragma once

// Direct-loop reference for grouped / dilated 2-d convolution. Written
// independently of the im2col path in src/nn/conv.cpp.
//
// out[n, o, p, q] = sum_{c, i, j} in[n, g*cin_g + c, p*sh + dh*i - pt, q*sw + dw*j - pl] * w[o, c, i, j]

#include <cstddef>

#include "gepd/nn/conv.hpp"

namespace gepd::testing {

inline Tensor conv_loop_oracle(const Tensor& x, const Tensor& w, const nn::ConvGeometry& g) {
  const long n_ = static_cast<long>(x.dim(0)), cin = static_cast<long>(x.dim(1));
  const long h = static_cast<long>(x.dim(2)), wd = static_cast<long>(x.dim(3));
  const long cout = static_cast<long>(w.dim(0)), cin_g = static_cast<long>(w.dim(1));
  const long kh = static_cast<long>(w.dim(2)), kw = static_cast<long>(w.dim(3));
  const long groups = static_cast<long>(g.groups), cout_g = cout / groups;
  const long pt = static_cast<long>(g.pad_top), pb = static_cast<long>(g.pad_bottom);
  const long pl = static_cast<long>(g.pad_left), pr = static_cast<long>(g.pad_right);
  const long dh = static_cast<long>(g.dilation_h), dw = static_cast<long>(g.dilation_w);
  const long sh = static_cast<long>(g.stride_h), sw = static_cast<long>(g.stride_w);
  const long ho = (h + pt + pb - dh * (kh - 1) - 1) / sh + 1;
  const long wo = (wd + pl + pr - dw * (kw - 1) - 1) / sw + 1;
  (void)cin;
  Tensor out({static_cast<std::size_t>(n_), static_cast<std::size_t>(cout), static_cast<std::size_t>(ho),
              static_cast<std::size_t>(wo)});
  for (long n = 0; n < n_; ++n) {
    for (long o = 0; o < cout; ++o) {
      const long grp = o / cout_g;
      for (long p = 0; p < ho; ++p) {
        for (long q = 0; q < wo; ++q) {
          double s = 0.0;
          for (long c = 0; c < cin_g; ++c) {
            for (long i = 0; i < kh; ++i) {
              for (long j = 0; j < kw; ++j) {
                const long r = p * sh + dh * i - pt;
                const long t = q * sw + dw * j - pl;
                if (r < 0 || r >= h || t < 0 || t >= wd) continue;
                s += x.at(static_cast<std::size_t>(n), static_cast<std::size_t>(grp * cin_g + c),
                          static_cast<std::size_t>(r), static_cast<std::size_t>(t)) *
                     w.at(static_cast<std::size_t>(o), static_cast<std::size_t>(c),
                          static_cast<std::size_t>(i), static_cast<std::size_t>(j));
              }
            }
          }
          out.at(static_cast<std::size_t>(n), static_cast<std::size_t>(o), static_cast<std::size_t>(p),
                 static_cast<std::size_t>(q)) = s;
        }
      }
    }
  }
  return out;
}

}  // namespace gepd::testing
