#pragma once

// Coefficients of W. J. Cody's rational Chebyshev approximations for the
// normal CDF (Math. Comp. 1969). Shared by the scalar and vector kernels.

namespace exoc::detail::cody {

// |x| <= 0.67448975
inline constexpr double a[5] = {2.2352520354606839287, 161.02823106855587881,
                                1067.6894854603709582, 18154.981253343561249,
                                0.065682337918207449113};
inline constexpr double b[4] = {47.20258190468824187, 976.09855173777669322,
                                10260.932208618978205, 45507.789335026729956};

// 0.67448975 < |x| <= sqrt(32)
inline constexpr double c[9] = {0.39894151208813466764, 8.8831497943883759412,
                                93.506656132177855979,  597.27027639480026226,
                                2494.5375852903726711,  6848.1904505362823326,
                                11602.651437647350124,  9842.7148383839780218,
                                1.0765576773720192317e-8};
inline constexpr double d[8] = {22.266688044328115691, 235.38790178262499861,
                                1519.377599407554805,  6485.558298266760755,
                                18615.571640885098091, 34900.952721145977266,
                                38912.003286093271411, 19685.429676859990727};

// |x| > sqrt(32)
inline constexpr double p[6] = {0.21589853405795699,     0.1274011611602473639,
                                0.022235277870649807,    0.001421619193227893466,
                                2.9112874951168792e-5,   0.02307344176494017303};
inline constexpr double q[5] = {1.28426009614491121, 0.468238212480865118,
                                0.0659881378689285515, 0.00378239633202758244,
                                7.29751555083966205e-5};

inline constexpr double kSplitCentral = 0.67448975;
inline constexpr double kSplitTail = 5.656854249492380195206754896838;  // sqrt(32)
// Beyond this the lower tail is below the smallest normal double.
inline constexpr double kUnderflow = 37.5193;

}  // namespace exoc::detail::cody
