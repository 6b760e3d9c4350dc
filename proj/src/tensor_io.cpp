#include "gdr2/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace gdr2 {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  bool eof() const { return pos >= buf.size(); }
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw ParseError(std::string("truncated tensor file while reading ") + what, pos);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= std::uint16_t(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
};

}  // namespace

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open tensor file '" + path + "'", 0);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "GDR2") != 0) throw ParseError("bad magic, expected GDR2", 0);
  r.pos = 4;
  const std::uint16_t version = r.u16("version");
  if (version != kTensorFileVersion)
    throw ParseError("unsupported tensor file version " + std::to_string(version), 4);

  std::vector<NamedTensor> tensors;
  while (!r.eof()) {
    NamedTensor t;
    t.dtype = r.u8("dtype");
    if (t.dtype != 1 && t.dtype != 2)
      throw ParseError("invalid dtype code " + std::to_string(t.dtype), r.pos - 1);
    const std::uint8_t ndim = r.u8("ndim");
    for (std::uint8_t i = 0; i < ndim; ++i)
      t.dims.push_back(static_cast<index_t>(r.u64("dims")));
    const std::uint32_t name_len = r.u32("name length");
    r.need(name_len, "name");
    t.name = buf.substr(r.pos, name_len);
    r.pos += name_len;

    const index_t count = t.element_count();
    if (t.dtype == 1) {
      r.need(static_cast<std::size_t>(count) * 4, "payload");
      t.f32.resize(static_cast<std::size_t>(count));
      for (index_t i = 0; i < count; ++i) {
        const std::uint32_t bits = r.u32("payload");
        t.f32[static_cast<std::size_t>(i)] = std::bit_cast<float>(bits);
      }
    } else {
      r.need(static_cast<std::size_t>(count) * 8, "payload");
      t.f64.resize(static_cast<std::size_t>(count));
      for (index_t i = 0; i < count; ++i) {
        const std::uint64_t bits = r.u64("payload");
        t.f64[static_cast<std::size_t>(i)] = std::bit_cast<double>(bits);
      }
    }
    tensors.push_back(std::move(t));
  }
  return tensors;
}

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::string out;
  out += "GDR2";
  put_u16(out, kTensorFileVersion);
  for (const NamedTensor& t : tensors) {
    check_contract(t.dtype == 1 || t.dtype == 2, "write_tensor_file: invalid dtype");
    const index_t count = t.element_count();
    if (t.dtype == 1) {
      check_contract(static_cast<index_t>(t.f32.size()) == count,
                     "write_tensor_file: payload length mismatch");
      for (float x : t.f32)
        check_contract(std::isfinite(x), "write_tensor_file: non-finite tensor entry");
    } else {
      check_contract(static_cast<index_t>(t.f64.size()) == count,
                     "write_tensor_file: payload length mismatch");
      for (double x : t.f64)
        check_contract(std::isfinite(x), "write_tensor_file: non-finite tensor entry");
    }
    out.push_back(static_cast<char>(t.dtype));
    out.push_back(static_cast<char>(t.dims.size()));
    for (index_t d : t.dims) put_u64(out, static_cast<std::uint64_t>(d));
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    if (t.dtype == 1)
      for (float x : t.f32) put_u32(out, std::bit_cast<std::uint32_t>(x));
    else
      for (double x : t.f64) put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ParseError("cannot write tensor file '" + path + "'", 0);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace gdr2
