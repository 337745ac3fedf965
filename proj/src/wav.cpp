#include "tss/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace tss {

namespace {

struct FmtChunk {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t bits = 0;
};

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff),
               static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

// Walks the RIFF chunk list, fills fmt, and positions the stream at the data
// payload. Returns the data byte count.
std::uint32_t locate_data(std::ifstream& in, const std::string& path,
                          FmtChunk* fmt) {
  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0)
    throw DataError(path + ": not a RIFF/WAVE file");
  read_u32(in);
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0)
    throw DataError(path + ": not a RIFF/WAVE file");
  bool have_fmt = false;
  while (in.read(tag, 4)) {
    std::uint32_t size = read_u32(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      fmt->format = read_u16(in);
      fmt->channels = read_u16(in);
      fmt->sample_rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      fmt->bits = read_u16(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw DataError(path + ": data chunk before fmt chunk");
      return size;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw DataError(path + ": no data chunk found");
}

void check_format(const std::string& path, const FmtChunk& fmt) {
  if (fmt.format != 1 || fmt.bits != 16)
    throw DataError(path + ": only 16-bit PCM WAV is accepted (format tag " +
                    std::to_string(fmt.format) + ", " + std::to_string(fmt.bits) +
                    " bits)");
  if (fmt.channels != 1)
    throw DataError(path + ": expected mono, got " +
                    std::to_string(fmt.channels) + " channels");
  if (fmt.sample_rate != 16000)
    throw DataError(path + ": expected 16000 Hz, got " +
                    std::to_string(fmt.sample_rate) + " Hz");
}

}  // namespace

Wav read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  FmtChunk fmt;
  std::uint32_t data_bytes = locate_data(in, path, &fmt);
  check_format(path, fmt);
  std::uint32_t count = data_bytes / 2;
  std::vector<std::int16_t> raw(count);
  in.read(reinterpret_cast<char*>(raw.data()), count * 2);
  if (!in) throw DataError(path + ": truncated data chunk");
  Wav wav;
  wav.sample_rate = static_cast<int>(fmt.sample_rate);
  wav.samples.resize(count);
  for (std::uint32_t i = 0; i < count; ++i)
    wav.samples[i] = static_cast<double>(raw[i]) / 32768.0;
  return wav;
}

void write_wav(const std::string& path, const Eigen::ArrayXd& samples,
               int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  std::uint32_t n = static_cast<std::uint32_t>(samples.size());
  std::uint32_t data_bytes = n * 2;
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, static_cast<std::uint32_t>(sample_rate));
  write_u32(out, static_cast<std::uint32_t>(sample_rate) * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (std::uint32_t i = 0; i < n; ++i) {
    double v = std::lrint(samples[i] * 32768.0);
    v = std::min(32767.0, std::max(-32768.0, v));
    std::int16_t s = static_cast<std::int16_t>(v);
    char b[2] = {static_cast<char>(s & 0xff), static_cast<char>((s >> 8) & 0xff)};
    out.write(b, 2);
  }
  if (!out) throw DataError(path + ": write failed");
}

Eigen::Index wav_num_samples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  FmtChunk fmt;
  std::uint32_t data_bytes = locate_data(in, path, &fmt);
  check_format(path, fmt);
  return static_cast<Eigen::Index>(data_bytes / 2);
}

}  // namespace tss
