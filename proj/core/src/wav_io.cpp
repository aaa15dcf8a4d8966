#include "hieraudio/wav_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "hieraudio/common.hpp"

namespace hieraudio {

namespace {

uint32_t read_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t read_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
void put_u32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back(static_cast<unsigned char>(x & 0xff));
  v.push_back(static_cast<unsigned char>((x >> 8) & 0xff));
  v.push_back(static_cast<unsigned char>((x >> 16) & 0xff));
  v.push_back(static_cast<unsigned char>((x >> 24) & 0xff));
}
void put_u16(std::vector<unsigned char>& v, uint16_t x) {
  v.push_back(static_cast<unsigned char>(x & 0xff));
  v.push_back(static_cast<unsigned char>((x >> 8) & 0xff));
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_input("cannot open WAV file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 44) fail_input("WAV too short: " + path);
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    fail_input("not a RIFF/WAVE file: " + path);
  }

  size_t pos = 12;
  bool have_fmt = false;
  uint16_t channels = 0, bits = 0, codec = 0;
  uint32_t rate = 0;
  const unsigned char* data = nullptr;
  uint32_t data_len = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    uint32_t chunk_len = read_u32(hdr + 4);
    size_t body = pos + 8;
    if (body + chunk_len > bytes.size()) fail_input("truncated WAV chunk: " + path);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) fail_input("malformed fmt chunk: " + path);
      codec = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = chunk_len;
    }
    pos = body + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }
  if (!have_fmt || data == nullptr) fail_input("missing fmt or data chunk: " + path);
  if (codec != 1) fail_input("unsupported WAV codec (want PCM): " + path);
  if (channels != 1) fail_input("unsupported channel count " + std::to_string(channels) +
                                " (want mono): " + path);
  if (rate != static_cast<uint32_t>(kSampleRate))
    fail_input("unsupported sample rate " + std::to_string(rate) + " Hz (want 16000): " + path);
  if (bits != 16) fail_input("unsupported bit depth " + std::to_string(bits) +
                             " (want 16): " + path);

  Waveform w;
  size_t n = data_len / 2;
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    int16_t s = static_cast<int16_t>(data[2 * i] | (data[2 * i + 1] << 8));
    w.samples[i] = std::max(-1.0, static_cast<double>(s) / 32767.0);
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& w) {
  require(w.sample_rate_hz == kSampleRate, "write_wav expects 16 kHz audio");
  std::vector<unsigned char> out;
  uint32_t data_len = static_cast<uint32_t>(w.samples.size() * 2);
  out.reserve(44 + data_len);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_len);
  out.insert(out.end(), {'W', 'A', 'V', 'E'});
  out.insert(out.end(), {'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, kSampleRate);
  put_u32(out, kSampleRate * 2);  // byte rate
  put_u16(out, 2);                // block align
  put_u16(out, 16);               // bits
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_len);
  for (double s : w.samples) {
    double x = std::clamp(s, -1.0, 1.0);
    long q = std::lround(x * 32767.0);
    q = std::clamp(q, -32768L, 32767L);
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_input("cannot write WAV file: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) fail_input("short write to WAV file: " + path);
}

}  // namespace hieraudio
