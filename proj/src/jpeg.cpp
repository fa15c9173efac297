#include "refkv/jpeg.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace refkv {

namespace {

// Annex K.1/K.2 quantization tables, natural (row-major) order
const int kLumaQuant[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
const int kChromaQuant[64] = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

const int kZigzag[64] = {0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,
                         12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6,  7,  14, 21, 28,
                         35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
                         58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

// Annex K.3 Huffman specifications: (bits[1..16], values)
const uint8_t kDcLumaBits[17] = {0, 0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
const uint8_t kDcLumaVals[12] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
const uint8_t kDcChromaBits[17] = {0, 0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
const uint8_t kDcChromaVals[12] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
const uint8_t kAcLumaBits[17] = {0, 0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d};
const uint8_t kAcLumaVals[162] = {
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61,
    0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52,
    0xd1, 0xf0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25,
    0x26, 0x27, 0x28, 0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45,
    0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64,
    0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83,
    0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99,
    0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6,
    0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3,
    0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8,
    0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa};
const uint8_t kAcChromaBits[17] = {0, 0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77};
const uint8_t kAcChromaVals[162] = {
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61,
    0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33,
    0x52, 0xf0, 0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18,
    0x19, 0x1a, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44,
    0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63,
    0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a,
    0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97,
    0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4,
    0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca,
    0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7,
    0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa};

struct HuffEncTable {
    uint16_t code[256];
    uint8_t size[256];
};

HuffEncTable build_enc_table(const uint8_t* bits, const uint8_t* vals) {
    HuffEncTable t{};
    int k = 0;
    uint16_t code = 0;
    for (int len = 1; len <= 16; ++len) {
        for (int i = 0; i < bits[len]; ++i) {
            t.code[vals[k]] = code;
            t.size[vals[k]] = uint8_t(len);
            ++code;
            ++k;
        }
        code <<= 1;
    }
    return t;
}

void scaled_quant(const int* base, int quality, int out[64]) {
    int q = std::min(100, std::max(1, quality));
    int scale = q < 50 ? 5000 / q : 200 - 2 * q;
    for (int i = 0; i < 64; ++i) {
        int v = (base[i] * scale + 50) / 100;
        out[i] = std::min(255, std::max(1, v));
    }
}

void fdct8x8(const double in[64], double out[64]) {
    for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    acc += in[y * 8 + x] * std::cos((2 * y + 1) * u * M_PI / 16.0) *
                           std::cos((2 * x + 1) * v * M_PI / 16.0);
            double cu = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
            double cv = v == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
            out[u * 8 + v] = 0.25 * cu * cv * acc;
        }
}

void idct8x8(const double in[64], double out[64]) {
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double acc = 0.0;
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v) {
                    double cu = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
                    double cv = v == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
                    acc += cu * cv * in[u * 8 + v] * std::cos((2 * y + 1) * u * M_PI / 16.0) *
                           std::cos((2 * x + 1) * v * M_PI / 16.0);
                }
            out[y * 8 + x] = 0.25 * acc;
        }
}

int bit_size(int v) {
    int a = v < 0 ? -v : v;
    int n = 0;
    while (a) {
        a >>= 1;
        ++n;
    }
    return n;
}

class BitWriter {
public:
    explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}
    void put(uint32_t bits, int n) {
        for (int i = n - 1; i >= 0; --i) {
            cur_ = uint8_t((cur_ << 1) | ((bits >> i) & 1));
            if (++nbits_ == 8) {
                out_.push_back(cur_);
                if (cur_ == 0xFF) out_.push_back(0x00);  // byte stuffing
                cur_ = 0;
                nbits_ = 0;
            }
        }
    }
    void flush() {
        while (nbits_ != 0) put(1, 1);  // pad with 1s
    }

private:
    std::vector<uint8_t>& out_;
    uint8_t cur_ = 0;
    int nbits_ = 0;
};

void encode_block(BitWriter& bw, const int zz[64], int& dc_pred, const HuffEncTable& dc,
                  const HuffEncTable& ac) {
    int diff = zz[0] - dc_pred;
    dc_pred = zz[0];
    int size = bit_size(diff);
    bw.put(dc.code[size], dc.size[size]);
    if (size > 0) {
        int bits = diff < 0 ? diff + (1 << size) - 1 : diff;
        bw.put(uint32_t(bits), size);
    }
    int run = 0;
    for (int i = 1; i < 64; ++i) {
        if (zz[i] == 0) {
            ++run;
            continue;
        }
        while (run > 15) {
            bw.put(ac.code[0xF0], ac.size[0xF0]);  // ZRL
            run -= 16;
        }
        int s = bit_size(zz[i]);
        int sym = (run << 4) | s;
        bw.put(ac.code[sym], ac.size[sym]);
        int bits = zz[i] < 0 ? zz[i] + (1 << s) - 1 : zz[i];
        bw.put(uint32_t(bits), s);
        run = 0;
    }
    if (run > 0) bw.put(ac.code[0x00], ac.size[0x00]);  // EOB
}

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v & 0xff));
}

void write_marker_segment(std::vector<uint8_t>& out, uint8_t marker,
                          const std::vector<uint8_t>& payload) {
    out.push_back(0xFF);
    out.push_back(marker);
    put_u16(out, uint16_t(payload.size() + 2));
    out.insert(out.end(), payload.begin(), payload.end());
}

}  // namespace

std::vector<uint8_t> jpeg_encode(const RgbImage& img, int quality) {
    if (quality < 1 || quality > 100)
        throw std::invalid_argument("jpeg_encode: quality must be in [1,100]");
    if (img.width < 1 || img.height < 1 ||
        int(img.rgb.size()) != img.width * img.height * 3)
        throw std::invalid_argument("jpeg_encode: bad image");

    int W = img.width, H = img.height;
    int pw = (W + 15) / 16 * 16, ph = (H + 15) / 16 * 16;  // pad to whole MCUs

    // color transform on the edge-replicated canvas
    std::vector<double> Y(size_t(pw) * ph), Cb(size_t(pw) * ph), Cr(size_t(pw) * ph);
    for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
            int sy = std::min(y, H - 1), sx = std::min(x, W - 1);
            double r = img.rgb[size_t((sy * W + sx) * 3 + 0)];
            double g = img.rgb[size_t((sy * W + sx) * 3 + 1)];
            double b = img.rgb[size_t((sy * W + sx) * 3 + 2)];
            Y[size_t(y * pw + x)] = 0.299 * r + 0.587 * g + 0.114 * b;
            Cb[size_t(y * pw + x)] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            Cr[size_t(y * pw + x)] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    // 4:2:0 chroma: 2×2 block average
    int cw = pw / 2, ch = ph / 2;
    std::vector<double> cb2(size_t(cw) * ch), cr2(size_t(cw) * ch);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
            cb2[size_t(y * cw + x)] =
                0.25 * (Cb[size_t((2 * y) * pw + 2 * x)] + Cb[size_t((2 * y) * pw + 2 * x + 1)] +
                        Cb[size_t((2 * y + 1) * pw + 2 * x)] +
                        Cb[size_t((2 * y + 1) * pw + 2 * x + 1)]);
            cr2[size_t(y * cw + x)] =
                0.25 * (Cr[size_t((2 * y) * pw + 2 * x)] + Cr[size_t((2 * y) * pw + 2 * x + 1)] +
                        Cr[size_t((2 * y + 1) * pw + 2 * x)] +
                        Cr[size_t((2 * y + 1) * pw + 2 * x + 1)]);
        }

    int ql[64], qc[64];
    scaled_quant(kLumaQuant, quality, ql);
    scaled_quant(kChromaQuant, quality, qc);

    std::vector<uint8_t> out;
    out.push_back(0xFF);
    out.push_back(0xD8);  // SOI
    {
        std::vector<uint8_t> app0 = {'J', 'F', 'I', 'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0};
        write_marker_segment(out, 0xE0, app0);
    }
    {
        std::vector<uint8_t> dqt;
        dqt.push_back(0x00);
        for (int i = 0; i < 64; ++i) dqt.push_back(uint8_t(ql[kZigzag[i]]));
        dqt.push_back(0x01);
        for (int i = 0; i < 64; ++i) dqt.push_back(uint8_t(qc[kZigzag[i]]));
        write_marker_segment(out, 0xDB, dqt);
    }
    {
        std::vector<uint8_t> sof = {8,
                                    uint8_t(H >> 8),
                                    uint8_t(H & 0xff),
                                    uint8_t(W >> 8),
                                    uint8_t(W & 0xff),
                                    3,
                                    1, 0x22, 0,   // Y: 2×2 sampling, table 0
                                    2, 0x11, 1,   // Cb
                                    3, 0x11, 1};  // Cr
        write_marker_segment(out, 0xC0, sof);
    }
    {
        auto add_dht = [&](uint8_t cls_id, const uint8_t* bits, const uint8_t* vals, int nvals) {
            std::vector<uint8_t> dht;
            dht.push_back(cls_id);
            for (int i = 1; i <= 16; ++i) dht.push_back(bits[i]);
            for (int i = 0; i < nvals; ++i) dht.push_back(vals[i]);
            write_marker_segment(out, 0xC4, dht);
        };
        add_dht(0x00, kDcLumaBits, kDcLumaVals, 12);
        add_dht(0x10, kAcLumaBits, kAcLumaVals, 162);
        add_dht(0x01, kDcChromaBits, kDcChromaVals, 12);
        add_dht(0x11, kAcChromaBits, kAcChromaVals, 162);
    }
    {
        std::vector<uint8_t> sos = {3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0};
        write_marker_segment(out, 0xDA, sos);
    }

    HuffEncTable dcl = build_enc_table(kDcLumaBits, kDcLumaVals);
    HuffEncTable acl = build_enc_table(kAcLumaBits, kAcLumaVals);
    HuffEncTable dcc = build_enc_table(kDcChromaBits, kDcChromaVals);
    HuffEncTable acc = build_enc_table(kAcChromaBits, kAcChromaVals);

    BitWriter bw(out);
    int dc_y = 0, dc_cb = 0, dc_cr = 0;
    auto emit = [&](const std::vector<double>& plane, int stride, int bx, int by, const int* q,
                    int& pred, const HuffEncTable& dc, const HuffEncTable& ac) {
        double blk[64], coef[64];
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                blk[y * 8 + x] = plane[size_t((by + y) * stride + bx + x)] - 128.0;
        fdct8x8(blk, coef);
        int zz[64];
        for (int i = 0; i < 64; ++i)
            zz[i] = int(std::llround(coef[kZigzag[i]] / double(q[kZigzag[i]])));
        encode_block(bw, zz, pred, dc, ac);
    };
    for (int my = 0; my < ph / 16; ++my)
        for (int mx = 0; mx < pw / 16; ++mx) {
            for (int by = 0; by < 2; ++by)
                for (int bx = 0; bx < 2; ++bx)
                    emit(Y, pw, mx * 16 + bx * 8, my * 16 + by * 8, ql, dc_y, dcl, acl);
            emit(cb2, cw, mx * 8, my * 8, qc, dc_cb, dcc, acc);
            emit(cr2, cw, mx * 8, my * 8, qc, dc_cr, dcc, acc);
        }
    bw.flush();
    out.push_back(0xFF);
    out.push_back(0xD9);  // EOI
    return out;
}

namespace {

[[noreturn]] void decode_fail(size_t offset, const std::string& what) {
    throw std::runtime_error("jpeg decode error at byte " + std::to_string(offset) + ": " + what);
}

struct HuffDecTable {
    // code lookup by (length, code value)
    int mincode[17], maxcode[17], valptr[17];
    std::vector<uint8_t> vals;
    bool present = false;
};

HuffDecTable build_dec_table(const uint8_t bits[17], const std::vector<uint8_t>& vals) {
    HuffDecTable t;
    t.vals = vals;
    int code = 0, k = 0;
    for (int len = 1; len <= 16; ++len) {
        t.valptr[len] = k;
        t.mincode[len] = code;
        code += bits[len];
        k += bits[len];
        t.maxcode[len] = code - 1;
        if (bits[len] == 0) t.maxcode[len] = -1;
        code <<= 1;
    }
    t.present = true;
    return t;
}

class BitReader {
public:
    BitReader(const std::vector<uint8_t>& data, size_t pos) : data_(data), pos_(pos) {}
    size_t pos() const { return pos_; }
    int bit() {
        if (nbits_ == 0) {
            if (pos_ >= data_.size()) decode_fail(pos_, "entropy data ran out");
            cur_ = data_[pos_++];
            if (cur_ == 0xFF) {
                if (pos_ >= data_.size()) decode_fail(pos_, "stuffing ran out");
                uint8_t next = data_[pos_++];
                if (next != 0x00) decode_fail(pos_ - 1, "unexpected marker in entropy data");
            }
            nbits_ = 8;
        }
        --nbits_;
        return (cur_ >> nbits_) & 1;
    }
    int bits(int n) {
        int v = 0;
        for (int i = 0; i < n; ++i) v = (v << 1) | bit();
        return v;
    }

private:
    const std::vector<uint8_t>& data_;
    size_t pos_;
    uint8_t cur_ = 0;
    int nbits_ = 0;
};

int huff_decode(BitReader& br, const HuffDecTable& t) {
    int code = br.bit();
    for (int len = 1; len <= 16; ++len) {
        if (t.maxcode[len] >= 0 && code <= t.maxcode[len])
            return t.vals[size_t(t.valptr[len] + code - t.mincode[len])];
        code = (code << 1) | br.bit();
    }
    decode_fail(br.pos(), "invalid Huffman code");
}

int extend_value(int v, int size) {
    if (size == 0) return 0;
    return v < (1 << (size - 1)) ? v - (1 << size) + 1 : v;
}

}  // namespace

RgbImage jpeg_decode(const std::vector<uint8_t>& bytes) {
    size_t p = 0;
    auto need = [&](size_t n) {
        if (p + n > bytes.size()) decode_fail(p, "truncated stream");
    };
    auto u16 = [&]() {
        need(2);
        int v = (bytes[p] << 8) | bytes[p + 1];
        p += 2;
        return v;
    };
    need(2);
    if (bytes[0] != 0xFF || bytes[1] != 0xD8) decode_fail(0, "missing SOI marker");
    p = 2;

    int qt[4][64];
    bool qt_seen[4] = {false, false, false, false};
    HuffDecTable dc_tables[4], ac_tables[4];
    int W = 0, H = 0;
    struct Comp {
        int id = 0, h = 1, v = 1, tq = 0, td = 0, ta = 0;
    };
    Comp comps[3];
    int ncomp = 0;
    size_t scan_start = 0;

    while (true) {
        need(2);
        if (bytes[p] != 0xFF) decode_fail(p, "expected marker");
        uint8_t marker = bytes[p + 1];
        p += 2;
        if (marker == 0xD9) decode_fail(p - 2, "no scan data before EOI");
        if (marker == 0x01 || (marker >= 0xD0 && marker <= 0xD7)) continue;
        size_t seg_start = p;
        int len = u16();
        if (len < 2) decode_fail(seg_start, "bad segment length");
        size_t seg_end = seg_start + size_t(len);
        need(size_t(len) - 2);
        if (marker == 0xDB) {
            while (p < seg_end) {
                int pq_tq = bytes[p++];
                int prec = pq_tq >> 4, id = pq_tq & 15;
                if (prec != 0 || id > 3) decode_fail(p - 1, "unsupported DQT entry");
                need(64);
                for (int i = 0; i < 64; ++i) qt[id][kZigzag[i]] = bytes[p + size_t(i)];
                p += 64;
                qt_seen[id] = true;
            }
        } else if (marker == 0xC0) {
            int prec = bytes[p++];
            if (prec != 8) decode_fail(p - 1, "only 8-bit precision supported");
            H = (bytes[p] << 8) | bytes[p + 1];
            W = (bytes[p + 2] << 8) | bytes[p + 3];
            p += 4;
            ncomp = bytes[p++];
            if (ncomp != 3 && ncomp != 1) decode_fail(p - 1, "unsupported component count");
            for (int c = 0; c < ncomp; ++c) {
                comps[c].id = bytes[p];
                comps[c].h = bytes[p + 1] >> 4;
                comps[c].v = bytes[p + 1] & 15;
                comps[c].tq = bytes[p + 2];
                p += 3;
            }
        } else if (marker == 0xC4) {
            while (p < seg_end) {
                int tc_th = bytes[p++];
                int cls = tc_th >> 4, id = tc_th & 15;
                if (id > 3 || cls > 1) decode_fail(p - 1, "bad DHT header");
                uint8_t bits[17] = {0};
                int total = 0;
                need(16);
                for (int i = 1; i <= 16; ++i) {
                    bits[i] = bytes[p++];
                    total += bits[i];
                }
                need(size_t(total));
                std::vector<uint8_t> vals(bytes.begin() + std::ptrdiff_t(p),
                                          bytes.begin() + std::ptrdiff_t(p + size_t(total)));
                p += size_t(total);
                (cls == 0 ? dc_tables[id] : ac_tables[id]) = build_dec_table(bits, vals);
            }
        } else if (marker == 0xDA) {
            int ns = bytes[p++];
            if (ns != ncomp) decode_fail(p - 1, "scan component count mismatch");
            for (int c = 0; c < ns; ++c) {
                int id = bytes[p];
                int tables = bytes[p + 1];
                p += 2;
                for (int k = 0; k < ncomp; ++k)
                    if (comps[k].id == id) {
                        comps[k].td = tables >> 4;
                        comps[k].ta = tables & 15;
                    }
            }
            p += 3;  // spectral selection bytes
            scan_start = p;
            break;
        } else if (marker >= 0xC1 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 &&
                   marker != 0xCC) {
            decode_fail(seg_start - 2, "only baseline (SOF0) is supported");
        } else {
            p = seg_end;  // skip APPn/COM and friends
        }
    }

    if (W < 1 || H < 1) decode_fail(scan_start, "missing SOF0 before scan");
    int hmax = 1, vmax = 1;
    for (int c = 0; c < ncomp; ++c) {
        hmax = std::max(hmax, comps[c].h);
        vmax = std::max(vmax, comps[c].v);
    }
    int mcux = (W + 8 * hmax - 1) / (8 * hmax);
    int mcuy = (H + 8 * vmax - 1) / (8 * vmax);

    std::vector<std::vector<double>> planes(static_cast<size_t>(ncomp));
    std::vector<int> pw(static_cast<size_t>(ncomp), 0), ph(static_cast<size_t>(ncomp), 0);
    for (int c = 0; c < ncomp; ++c) {
        pw[size_t(c)] = mcux * 8 * comps[c].h;
        ph[size_t(c)] = mcuy * 8 * comps[c].v;
        planes[size_t(c)].assign(size_t(pw[size_t(c)]) * size_t(ph[size_t(c)]), 0.0);
        if (!qt_seen[comps[c].tq]) decode_fail(scan_start, "missing quantization table");
        if (!dc_tables[comps[c].td].present || !ac_tables[comps[c].ta].present)
            decode_fail(scan_start, "missing Huffman table");
    }

    BitReader br(bytes, scan_start);
    int preds[3] = {0, 0, 0};
    for (int my = 0; my < mcuy; ++my)
        for (int mx = 0; mx < mcux; ++mx)
            for (int c = 0; c < ncomp; ++c)
                for (int by = 0; by < comps[c].v; ++by)
                    for (int bx = 0; bx < comps[c].h; ++bx) {
                        int zz[64] = {0};
                        int s = huff_decode(br, dc_tables[comps[c].td]);
                        if (s > 11) decode_fail(br.pos(), "bad DC size");
                        int diff = extend_value(br.bits(s), s);
                        preds[c] += diff;
                        zz[0] = preds[c];
                        for (int k = 1; k < 64;) {
                            int rs = huff_decode(br, ac_tables[comps[c].ta]);
                            int run = rs >> 4, size = rs & 15;
                            if (size == 0) {
                                if (run == 15) {
                                    k += 16;
                                    continue;
                                }
                                break;  // EOB
                            }
                            k += run;
                            if (k > 63) decode_fail(br.pos(), "AC run overflows the block");
                            zz[k++] = extend_value(br.bits(size), size);
                        }
                        double coef[64], blk[64];
                        const int* q = qt[comps[c].tq];
                        for (int i = 0; i < 64; ++i)
                            coef[kZigzag[i]] = double(zz[i]) * q[kZigzag[i]];
                        idct8x8(coef, blk);
                        int ox = (mx * comps[c].h + bx) * 8, oy = (my * comps[c].v + by) * 8;
                        for (int y = 0; y < 8; ++y)
                            for (int x = 0; x < 8; ++x)
                                planes[size_t(c)][size_t((oy + y) * pw[size_t(c)] + ox + x)] =
                                    blk[y * 8 + x] + 128.0;
                    }

    RgbImage out;
    out.width = W;
    out.height = H;
    out.rgb.resize(size_t(W) * size_t(H) * 3);
    auto sample_plane = [&](int c, int x, int y) {
        // nearest-neighbor expansion of the subsampled plane
        int sx = x * comps[c].h / hmax, sy = y * comps[c].v / vmax;
        return planes[size_t(c)][size_t(sy * pw[size_t(c)] + sx)];
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double r, g, b;
            if (ncomp == 1) {
                r = g = b = sample_plane(0, x, y);
            } else {
                double Y = sample_plane(0, x, y);
                double Cb = sample_plane(1, x, y) - 128.0;
                double Cr = sample_plane(2, x, y) - 128.0;
                r = Y + 1.402 * Cr;
                g = Y - 0.344136 * Cb - 0.714136 * Cr;
                b = Y + 1.772 * Cb;
            }
            auto q8 = [](double v) {
                return uint8_t(std::lround(std::fmin(255.0, std::fmax(0.0, v))));
            };
            out.rgb[size_t((y * W + x) * 3 + 0)] = q8(r);
            out.rgb[size_t((y * W + x) * 3 + 1)] = q8(g);
            out.rgb[size_t((y * W + x) * 3 + 2)] = q8(b);
        }
    return out;
}

}  // namespace refkv
