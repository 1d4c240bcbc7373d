#pragma once

// Waveform loading and the fixed-resolution log-mel front-end.

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "adares/tensor.hpp"

namespace adares::dsp {

struct Waveform {
    std::vector<double> samples;
    double sample_rate = 16000.0;

    void validate() const {
        if (!(sample_rate > 0)) throw ConfigError("sample rate must be positive");
        for (double s : samples)
            if (!std::isfinite(s)) throw NumericError("waveform contains non-finite samples");
    }
    double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// ---- WAV -----------------------------------------------------------------

enum class WavFormat { Pcm16, Float32 };

namespace detail {
inline std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}
}  // namespace detail

/// Reads a PCM16 or float32 RIFF/WAVE file, averaging channels to mono.
/// With `expected_rate` set, a different file rate is an error (no resampling).
inline Waveform load_wav(const std::filesystem::path& path, std::optional<double> expected_rate = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw IoError("malformed RIFF header in " + path.string());
    }
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::size_t data_len = 0;
    bool have_fmt = false;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        const std::uint32_t len = detail::read_u32(chunk + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) {
            // Tolerate a truncated data chunk; anything else is malformed.
            if (std::memcmp(chunk, "data", 4) != 0) throw IoError("truncated chunk in " + path.string());
        }
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (len < 16) throw IoError("malformed fmt chunk in " + path.string());
            format = detail::read_u16(bytes.data() + body);
            channels = detail::read_u16(bytes.data() + body + 2);
            rate = detail::read_u32(bytes.data() + body + 4);
            bits = detail::read_u16(bytes.data() + body + 14);
            if (format == 0xFFFE && len >= 26) format = detail::read_u16(bytes.data() + body + 24);
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = std::min<std::size_t>(len, bytes.size() - body);
        }
        pos = body + len + (len & 1U);
    }
    if (!have_fmt || !data) throw IoError("missing fmt or data chunk in " + path.string());
    if (channels == 0 || rate == 0) throw IoError("invalid channel count or sample rate in " + path.string());
    const bool pcm16 = format == 1 && bits == 16;
    const bool f32 = format == 3 && bits == 32;
    if (!pcm16 && !f32) {
        throw IoError("unsupported WAV encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
                      " bits); expected PCM16 or float32");
    }
    const std::size_t width = bits / 8;
    const std::size_t frames = data_len / (width * channels);
    Waveform w;
    w.sample_rate = rate;
    w.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            const unsigned char* p = data + (i * channels + c) * width;
            if (pcm16) {
                acc += static_cast<std::int16_t>(detail::read_u16(p)) / 32768.0;
            } else {
                const std::uint32_t u = detail::read_u32(p);
                float f;
                std::memcpy(&f, &u, sizeof f);
                acc += static_cast<double>(f);
            }
        }
        w.samples[i] = acc / channels;
    }
    if (expected_rate && *expected_rate != w.sample_rate) {
        throw ConfigError("sample rate mismatch: file has " + std::to_string(rate) + " Hz, expected " +
                          std::to_string(static_cast<long>(*expected_rate)) + " Hz");
    }
    w.validate();
    return w;
}

/// Writes interleaved channels (all the same length) as a WAV file.
inline void write_wav(const std::filesystem::path& path, const std::vector<std::vector<double>>& channels,
                      double sample_rate, WavFormat format = WavFormat::Pcm16) {
    if (channels.empty()) throw ConfigError("write_wav needs at least one channel");
    const std::size_t frames = channels.front().size();
    for (const auto& ch : channels)
        if (ch.size() != frames) throw ConfigError("write_wav channels differ in length");
    const std::uint16_t nch = static_cast<std::uint16_t>(channels.size());
    const std::uint16_t bits = format == WavFormat::Pcm16 ? 16 : 32;
    const std::uint32_t data_len = static_cast<std::uint32_t>(frames * nch * (bits / 8));
    std::string out;
    out.reserve(44 + data_len);
    out += "RIFF";
    detail::put_u32(out, 36 + data_len);
    out += "WAVEfmt ";
    detail::put_u32(out, 16);
    detail::put_u16(out, format == WavFormat::Pcm16 ? 1 : 3);
    detail::put_u16(out, nch);
    detail::put_u32(out, static_cast<std::uint32_t>(sample_rate));
    detail::put_u32(out, static_cast<std::uint32_t>(sample_rate) * nch * (bits / 8));
    detail::put_u16(out, static_cast<std::uint16_t>(nch * (bits / 8)));
    detail::put_u16(out, bits);
    out += "data";
    detail::put_u32(out, data_len);
    for (std::size_t i = 0; i < frames; ++i) {
        for (const auto& ch : channels) {
            if (format == WavFormat::Pcm16) {
                const double v = std::clamp(ch[i], -1.0, 1.0);
                const auto q = static_cast<std::int16_t>(std::lround(std::min(v * 32768.0, 32767.0)));
                detail::put_u16(out, static_cast<std::uint16_t>(q));
            } else {
                const float f = static_cast<float>(ch[i]);
                std::uint32_t u;
                std::memcpy(&u, &f, sizeof u);
                detail::put_u32(out, u);
            }
        }
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w, WavFormat format = WavFormat::Pcm16) {
    write_wav(path, std::vector<std::vector<double>>{w.samples}, w.sample_rate, format);
}

// ---- mel front-end ---------------------------------------------------------

struct SpectrogramConfig {
    double window_length_ms = 25.0;
    double hop_ms = 10.0;
    std::size_t n_mels = 128;
    double sample_rate = 16000.0;
    double log_floor = 1e-10;
    std::size_t fft_size = 1024;
    double f_min = 0.0;
    double f_max = 0.0;  // 0 means Nyquist

    std::size_t hop_samples() const { return static_cast<std::size_t>(std::lround(hop_ms * sample_rate / 1000.0)); }
    std::size_t window_samples() const {
        return static_cast<std::size_t>(std::lround(window_length_ms * sample_rate / 1000.0));
    }
    double nyquist() const { return f_max > 0 ? f_max : sample_rate / 2.0; }
    double fps() const { return 1000.0 / hop_ms; }

    void validate() const {
        if (!(sample_rate > 0)) throw ConfigError("sample rate must be positive");
        if (!(hop_ms > 0) || !(window_length_ms > 0)) throw ConfigError("window and hop must be positive");
        if (hop_ms > window_length_ms) throw ConfigError("hop must not exceed the window length");
        if (n_mels < 1) throw ConfigError("n_mels must be at least 1");
        if (hop_samples() < 1) throw ConfigError("hop is shorter than one sample");
        if (fft_size < window_samples()) throw ConfigError("fft_size must cover the analysis window");
        if (!(log_floor > 0)) throw ConfigError("log_floor must be positive");
        if (f_min < 0 || nyquist() <= f_min || nyquist() > sample_rate / 2.0) throw ConfigError("invalid mel band edges");
    }
};

struct Spectrogram {
    Tensor values;         // F x T, log(linear + log_floor)
    Tensor linear_values;  // F x T, mel-weighted STFT magnitude
    std::size_t F = 0;
    std::size_t T = 0;
    double fps = 0.0;
};

/// HTK mel scale.
inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Frames produced for `length` samples at hop `hop`: ceil(L / h).
inline std::size_t frame_count(std::size_t length, std::size_t hop) { return (length + hop - 1) / hop; }

/// Unit-peak triangular filters on the HTK mel scale, stored sparsely per row.
class MelFilterbank {
public:
    struct Row {
        std::size_t first_bin = 0;
        std::vector<double> weights;
    };

    MelFilterbank(std::size_t n_mels, std::size_t fft_size, double sample_rate, double f_min, double f_max)
        : bins_(fft_size / 2 + 1), rows_(n_mels), centers_hz_(n_mels) {
        const double mlo = hz_to_mel(f_min), mhi = hz_to_mel(f_max);
        std::vector<double> edges(n_mels + 2);
        for (std::size_t i = 0; i < edges.size(); ++i) {
            edges[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
        }
        const double bin_hz = sample_rate / static_cast<double>(fft_size);
        for (std::size_t m = 0; m < n_mels; ++m) {
            const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
            centers_hz_[m] = c;
            Row& row = rows_[m];
            bool started = false;
            for (std::size_t k = 0; k < bins_; ++k) {
                const double f = static_cast<double>(k) * bin_hz;
                const double w = std::max(0.0, std::min((f - lo) / (c - lo), (hi - f) / (hi - c)));
                if (w > 0) {
                    if (!started) {
                        row.first_bin = k;
                        started = true;
                    }
                    row.weights.resize(k - row.first_bin + 1, 0.0);
                    row.weights.back() = w;
                } else if (started) {
                    break;
                }
            }
        }
    }

    explicit MelFilterbank(const SpectrogramConfig& cfg)
        : MelFilterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.f_min, cfg.nyquist()) {}

    std::size_t n_mels() const { return rows_.size(); }
    std::size_t n_bins() const { return bins_; }
    const Row& row(std::size_t m) const { return rows_.at(m); }
    double center_hz(std::size_t m) const { return centers_hz_.at(m); }

    /// Dense n_mels x n_bins matrix.
    Tensor dense() const {
        Tensor out({rows_.size(), bins_});
        for (std::size_t m = 0; m < rows_.size(); ++m)
            for (std::size_t k = 0; k < rows_[m].weights.size(); ++k) out.at(m, rows_[m].first_bin + k) = rows_[m].weights[k];
        return out;
    }

    double apply(std::size_t m, const double* magnitude) const {
        const Row& r = rows_[m];
        double acc = 0.0;
        for (std::size_t k = 0; k < r.weights.size(); ++k) acc += r.weights[k] * magnitude[r.first_bin + k];
        return acc;
    }

private:
    std::size_t bins_;
    std::vector<Row> rows_;
    std::vector<double> centers_hz_;
};

namespace detail {

struct FftwBuffer {
    double* real = nullptr;
    fftw_complex* spectrum = nullptr;
    explicit FftwBuffer(std::size_t n)
        : real(fftw_alloc_real(n)), spectrum(fftw_alloc_complex(n / 2 + 1)) {}
    ~FftwBuffer() {
        fftw_free(real);
        fftw_free(spectrum);
    }
    FftwBuffer(const FftwBuffer&) = delete;
    FftwBuffer& operator=(const FftwBuffer&) = delete;
};

/// Real-to-complex plans are created once per size; fftw planning is not thread-safe.
inline fftw_plan r2c_plan(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, fftw_plan> plans;
    std::lock_guard lock(mu);
    if (auto it = plans.find(n); it != plans.end()) return it->second;
    FftwBuffer scratch(n);
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), scratch.real, scratch.spectrum, FFTW_ESTIMATE);
    plans.emplace(n, p);
    return p;
}

inline std::shared_ptr<const MelFilterbank> cached_filterbank(const SpectrogramConfig& cfg) {
    static std::mutex mu;
    static std::map<std::tuple<std::size_t, std::size_t, double, double, double>, std::shared_ptr<const MelFilterbank>> cache;
    const auto key = std::make_tuple(cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.f_min, cfg.nyquist());
    std::lock_guard lock(mu);
    auto& slot = cache[key];
    if (!slot) slot = std::make_shared<const MelFilterbank>(cfg);
    return slot;
}

/// Mirror index into [0, n) without repeating the edge sample.
inline std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

}  // namespace detail

inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    }
    return w;
}

/// Log-mel spectrogram with frames centred at multiples of the hop (reflect padding at both ends).
inline Spectrogram mel_spectrogram(const Waveform& w, const SpectrogramConfig& cfg) {
    cfg.validate();
    w.validate();
    if (w.sample_rate != cfg.sample_rate) {
        throw ConfigError("waveform rate " + std::to_string(w.sample_rate) + " differs from configured " +
                          std::to_string(cfg.sample_rate));
    }
    const std::size_t hop = cfg.hop_samples();
    const std::size_t L = w.samples.size();
    if (L < hop) throw ConfigError("waveform shorter than one hop");
    const std::size_t win = cfg.window_samples();
    const std::size_t nfft = cfg.fft_size;
    const std::size_t T = frame_count(L, hop);
    const auto fb = detail::cached_filterbank(cfg);
    const std::vector<double> window = hann_window(win);
    const fftw_plan plan = detail::r2c_plan(nfft);

    Spectrogram sp;
    sp.F = cfg.n_mels;
    sp.T = T;
    sp.fps = static_cast<double>(cfg.sample_rate) / static_cast<double>(hop);
    sp.linear_values = Tensor({sp.F, T});
    sp.values = Tensor({sp.F, T});

    detail::FftwBuffer buf(nfft);
    std::vector<double> magnitude(nfft / 2 + 1);
    const auto half = static_cast<std::ptrdiff_t>(win / 2);
    for (std::size_t tau = 0; tau < T; ++tau) {
        const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(tau * hop) - half;
        for (std::size_t n = 0; n < win; ++n) {
            buf.real[n] = window[n] * w.samples[detail::reflect(start + static_cast<std::ptrdiff_t>(n), L)];
        }
        std::fill(buf.real + win, buf.real + nfft, 0.0);
        fftw_execute_dft_r2c(plan, buf.real, buf.spectrum);
        for (std::size_t k = 0; k < magnitude.size(); ++k) {
            magnitude[k] = std::hypot(buf.spectrum[k][0], buf.spectrum[k][1]);
        }
        for (std::size_t m = 0; m < sp.F; ++m) {
            const double v = fb->apply(m, magnitude.data());
            sp.linear_values.at(m, tau) = v;
            sp.values.at(m, tau) = std::log(v + cfg.log_floor);
        }
    }
    return sp;
}

/// Per-frame RMS over mel bins of the linear spectrogram, after scaling the clip so its
/// largest linear value is 1. A silent clip yields all zeros.
inline std::vector<double> frame_energy(const Spectrogram& sp) {
    const Tensor& lin = sp.linear_values;
    if (lin.rank() != 2 || lin.dim(0) != sp.F || lin.dim(1) != sp.T) throw ShapeError("spectrogram shape mismatch");
    double peak = 0.0;
    for (double v : lin.data()) peak = std::max(peak, v);
    std::vector<double> energy(sp.T, 0.0);
    if (peak <= 0) return energy;
    for (std::size_t tau = 0; tau < sp.T; ++tau) {
        double acc = 0.0;
        for (std::size_t f = 0; f < sp.F; ++f) {
            const double v = lin.at(f, tau) / peak;
            acc += v * v;
        }
        energy[tau] = std::sqrt(acc / static_cast<double>(sp.F));
    }
    return energy;
}

}  // namespace adares::dsp
