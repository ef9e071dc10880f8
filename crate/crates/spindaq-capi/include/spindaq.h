/* C interface to the spindaq mixed-signal DAQ emulator. */

#ifndef SPINDAQ_H
#define SPINDAQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible C-ABI call.
 */
typedef enum SpindaqStatus {
  /**
   * Success.
   */
  SPINDAQ_STATUS_OK = 0,
  /**
   * A pointer was null, a string was not UTF-8, or a value was out of range.
   */
  SPINDAQ_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Socket-level failure (bind, send, receive).
   */
  SPINDAQ_STATUS_IO = 2,
  /**
   * The device did not answer within the retry budget.
   */
  SPINDAQ_STATUS_TIMEOUT = 3,
  /**
   * Malformed frame, payload, or sequencing violation.
   */
  SPINDAQ_STATUS_PROTOCOL = 4,
  /**
   * The device answered with an error status.
   */
  SPINDAQ_STATUS_DEVICE = 5,
  /**
   * A caught panic; state may be inconsistent, free the handle.
   */
  SPINDAQ_STATUS_INTERNAL = 6,
} SpindaqStatus;

/**
 * Opaque client session.
 */
typedef struct SpindaqClient SpindaqClient;

/**
 * Opaque in-process emulator instance.
 */
typedef struct SpindaqServer SpindaqServer;

/**
 * Acquisition-and-processing configuration (mirror of the SET_SAP command).
 */
typedef struct SpindaqSapConfig {
  /**
   * 0 = sequence pattern, nonzero = continuous pattern.
   */
  uint8_t pattern_continuous;
  /**
   * 0 = internal PWM edges, 1 = external trigger input, 2 = software.
   */
  uint8_t trigger_source;
  /**
   * Wait after each trigger before the window opens.
   */
  uint64_t delay_ns;
  /**
   * Acquisition window per trigger (sequence) or span (continuous).
   */
  uint64_t window_ns;
  /**
   * Sequence length N.
   */
  uint32_t points;
  /**
   * Consecutive triggers per point, R.
   */
  uint32_t point_repeats;
  /**
   * Full sweeps, S.
   */
  uint32_t sweep_repeats;
  /**
   * Largest single continuous-mode read, M.
   */
  uint16_t continuous_read_max;
  /**
   * K: continuous mode emits one packet per K ticks; sequence mode samples
   * the window on a K-tick stride.
   */
  uint32_t decimation;
} SpindaqSapConfig;

/**
 * Snapshot of the device state (mirror of the STATUS reply).
 */
typedef struct SpindaqStatusReport {
  uint8_t running;
  uint8_t pattern_continuous;
  uint8_t trigger_source;
  uint64_t packets_emitted;
  uint64_t dropped_triggers;
  uint16_t ring_available;
  uint64_t emu_time_ns;
  uint32_t malformed_datagrams;
  uint64_t pwm_period_ticks;
  /**
   * Duty in thousandths.
   */
  uint16_t pwm_duty_millis;
  uint32_t dds_frequency_word;
  uint16_t dds_amplitude_mvpp;
  uint32_t mw_cursor;
} SpindaqStatusReport;

/**
 * One acquisition record: emulated timestamp, sweep point, both analog
 * channels as signed codes, and the photon count in the window.
 */
typedef struct SpindaqPacket {
  uint64_t timestamp_ns;
  uint16_t point_index;
  int16_t ch1;
  int16_t ch2;
  uint32_t photon_count;
} SpindaqPacket;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. Never null;
 * empty before any failure. Valid until the next failing call here.
 */
const char *spindaq_last_error(void);

/**
 * Start an in-process emulator on `port` (0 picks an ephemeral port) with
 * the given RNG seed and the built-in default scenario.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum SpindaqStatus spindaq_server_start(uint16_t port, uint64_t seed, struct SpindaqServer **out);

/**
 * UDP port the emulator is listening on.
 *
 * # Safety
 * `server` must be a live handle from `spindaq_server_start`.
 */
uint16_t spindaq_server_port(const struct SpindaqServer *server);

/**
 * Shut the emulator down and release the handle. Null is a no-op.
 *
 * # Safety
 * `server` must come from `spindaq_server_start` and not be used afterwards.
 */
void spindaq_server_free(struct SpindaqServer *server);

/**
 * Open a session to a device at `host:port` (HELLO handshake included).
 *
 * # Safety
 * `host` must be a NUL-terminated string, `out` writable for one pointer.
 */
enum SpindaqStatus spindaq_client_connect(const char *host,
                                          uint16_t port,
                                          struct SpindaqClient **out);

/**
 * Release a client session. Null is a no-op.
 *
 * # Safety
 * `client` must come from `spindaq_client_connect`, not used afterwards.
 */
void spindaq_client_free(struct SpindaqClient *client);

/**
 * Copy the device identity string (NUL-terminated) into `buf`.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes.
 */
enum SpindaqStatus spindaq_client_identity(struct SpindaqClient *client, char *buf, size_t cap);

/**
 * Configure acquisition (SET_SAP).
 *
 * # Safety
 * `client` must be live and `config` readable.
 */
enum SpindaqStatus spindaq_client_set_sap(struct SpindaqClient *client,
                                          const struct SpindaqSapConfig *config);

/**
 * Program the DDS tone (SET_DDS). `waveform`: 0 sine, 1 square, 2 triangle,
 * 3 sawtooth.
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_set_dds(struct SpindaqClient *client,
                                          double frequency_hz,
                                          double amplitude_vpp,
                                          double phase_offset_rad,
                                          uint8_t waveform);

/**
 * Program the PWM channel (SET_PWM).
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_set_pwm(struct SpindaqClient *client,
                                          uint64_t period_ticks,
                                          double duty,
                                          double rise_fall_ns);

/**
 * Enable or disable thermal-bias correction at the given board temperature
 * (SET_BIAS with the factory table). Pass NaN to keep the device's current
 * temperature estimate.
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_set_bias(struct SpindaqClient *client,
                                           uint8_t enabled,
                                           double temperature_c);

/**
 * Replace the emulated physics scenario from a JSON document (SET_ENV).
 * The schema matches the server's configuration file `scenario` section.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `client` must be live.
 */
enum SpindaqStatus spindaq_client_set_scenario_json(struct SpindaqClient *client, const char *json);

/**
 * Start acquisition (ARM).
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_arm(struct SpindaqClient *client);

/**
 * Abort acquisition (STOP).
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_stop(struct SpindaqClient *client);

/**
 * Inject one software trigger (SOFT_TRIGGER).
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_soft_trigger(struct SpindaqClient *client);

/**
 * Fetch the device status snapshot (STATUS).
 *
 * # Safety
 * `client` must be live and `out` writable.
 */
enum SpindaqStatus spindaq_client_status(struct SpindaqClient *client,
                                         struct SpindaqStatusReport *out);

/**
 * Poll STATUS until the device reports not-running, or fail with
 * `SPINDAQ_STATUS_PROTOCOL` after `budget_ms` milliseconds.
 *
 * # Safety
 * `client` must be a live handle.
 */
enum SpindaqStatus spindaq_client_wait_idle(struct SpindaqClient *client, uint64_t budget_ms);

/**
 * Read up to `count` packets starting at `offset` (READ). Sequence mode
 * reads are positional in the finished store and repeatable; continuous
 * mode consumes the ring. Writes at most `count` packets into `out` and
 * stores the number written in `written`.
 *
 * # Safety
 * `out` must be writable for `count` packets, `written` for one usize.
 */
enum SpindaqStatus spindaq_client_read(struct SpindaqClient *client,
                                       uint32_t offset,
                                       uint16_t count,
                                       struct SpindaqPacket *out,
                                       size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPINDAQ_H */
