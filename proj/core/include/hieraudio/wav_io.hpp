#pragma once

#include <string>

#include "hieraudio/waveform.hpp"

namespace hieraudio {

// Strict PCM16 little-endian mono RIFF/WAVE at 16 kHz. Anything else is
// rejected with a descriptive message.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

}  // namespace hieraudio
