/**
 * Reader for MELD weight bundles.
 *
 * Layout, all little-endian: magic "MELD" · u32 version (=1) · u64 config
 * length · UTF-8 JSON architecture config · per-tensor records (u16 name
 * length, name, u8 rank, u32 extents, float32 row-major data) · trailing
 * CRC32 over every preceding byte.
 *
 * Failure modes are distinct classes so the page can show the user exactly
 * what is wrong with a file. Structure is parsed before the checksum is
 * verified so a file cut short reports as truncated rather than as a
 * checksum mismatch.
 */

export class MeldError extends Error {}
export class BadMagicError extends MeldError {}
export class UnsupportedVersionError extends MeldError {}
export class TruncatedStreamError extends MeldError {}
export class ChecksumMismatchError extends MeldError {}
export class WeightMismatchError extends MeldError {}

export interface LayerSpec {
  kind: "conv" | "batchnorm" | "relu" | "global_avg_pool" | "softmax";
  in_ch?: number;
  out_ch?: number;
  kernel_size?: number;
  dilation?: number;
  bias?: boolean;
}

export interface ArchConfig {
  name: string;
  input: { channels: number; height: number; width: number };
  layers: LayerSpec[];
}

export interface NamedTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

export interface WeightBundle {
  config: ArchConfig;
  tensors: Map<string, NamedTensor>;
  /** conv kernel + batchnorm parameter/statistic entries, in layer order */
  paramCount: number;
}

const MAGIC = 0x4d454c44; // "MELD" read as big-endian u32 for the compare
const FORMAT_VERSION = 1;

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

class Reader {
  pos = 0;
  private view: DataView;

  constructor(private bytes: Uint8Array) {
    this.view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  }

  get length(): number {
    return this.bytes.length;
  }

  take(n: number, what: string): Uint8Array {
    if (this.pos + n > this.bytes.length) {
      throw new TruncatedStreamError(
        `file ends inside ${what} (${this.bytes.length - this.pos} of ` +
          `${n} bytes left)`,
      );
    }
    const slice = this.bytes.subarray(this.pos, this.pos + n);
    this.pos += n;
    return slice;
  }

  u8(what: string): number {
    return this.take(1, what)[0];
  }

  u16(what: string): number {
    const at = this.pos;
    this.take(2, what);
    return this.view.getUint16(at, true);
  }

  u32(what: string): number {
    const at = this.pos;
    this.take(4, what);
    return this.view.getUint32(at, true);
  }

  u64(what: string): number {
    const at = this.pos;
    this.take(8, what);
    const value = this.view.getBigUint64(at, true);
    if (value > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new MeldError(`${what} is implausibly large: ${value}`);
    }
    return Number(value);
  }
}

/** Expected tensor entries (name, shape) for a config, in layer order. */
export function tensorNamesFor(config: ArchConfig): Array<[string, number[]]> {
  const entries: Array<[string, number[]]> = [];
  let width = config.input.channels;
  config.layers.forEach((layer, i) => {
    const prefix = `layer${String(i).padStart(2, "0")}`;
    if (layer.kind === "conv") {
      const { out_ch, in_ch, kernel_size } = layer;
      if (!out_ch || !in_ch || !kernel_size) {
        throw new MeldError(`conv layer ${i} is missing shape fields`);
      }
      entries.push([`${prefix}.kernel`, [out_ch, in_ch, kernel_size, kernel_size]]);
      if (layer.bias !== false) {
        entries.push([`${prefix}.bias`, [out_ch]]);
      }
      width = out_ch;
    } else if (layer.kind === "batchnorm") {
      for (const part of ["gamma", "beta", "running_mean", "running_var"]) {
        entries.push([`${prefix}.${part}`, [width]]);
      }
    }
  });
  return entries;
}

function validateConfig(obj: unknown): ArchConfig {
  const cfg = obj as ArchConfig;
  if (
    typeof cfg !== "object" ||
    cfg === null ||
    typeof cfg.name !== "string" ||
    typeof cfg.input !== "object" ||
    !Array.isArray(cfg.layers)
  ) {
    throw new MeldError("embedded config is missing required fields");
  }
  return cfg;
}

export function parseMeld(buffer: ArrayBuffer): WeightBundle {
  const bytes = new Uint8Array(buffer);
  if (bytes.length < 4) {
    throw new TruncatedStreamError(
      `file is ${bytes.length} bytes, shorter than the magic`,
    );
  }
  const magicView = new DataView(buffer, 0, 4);
  if (magicView.getUint32(0, false) !== MAGIC) {
    const head = Array.from(bytes.subarray(0, 4))
      .map((b) => String.fromCharCode(b))
      .join("");
    throw new BadMagicError(`not a MELD weight file (starts with ${JSON.stringify(head)})`);
  }
  if (bytes.length < 8) {
    throw new TruncatedStreamError("file ends inside the version field");
  }
  const version = new DataView(buffer, 4, 4).getUint32(0, true);
  if (version !== FORMAT_VERSION) {
    throw new UnsupportedVersionError(
      `unsupported MELD format version ${version} (this reader handles ${FORMAT_VERSION})`,
    );
  }
  if (bytes.length < 16) {
    throw new TruncatedStreamError(
      "file has no room for the config length and checksum trailer",
    );
  }

  const body = new Reader(bytes.subarray(0, bytes.length - 4));
  body.pos = 8;
  const configLen = body.u64("the config length");
  const configBytes = body.take(configLen, "the config JSON");
  let config: ArchConfig;
  try {
    config = validateConfig(JSON.parse(new TextDecoder("utf-8", { fatal: true }).decode(configBytes)));
  } catch (err) {
    if (err instanceof MeldError) throw err;
    throw new MeldError(`embedded config is not valid JSON: ${(err as Error).message}`);
  }

  const tensors = new Map<string, NamedTensor>();
  while (body.pos < body.length) {
    const nameLen = body.u16("a tensor name length");
    const name = new TextDecoder().decode(body.take(nameLen, "a tensor name"));
    const rank = body.u8(`the rank of ${name}`);
    const shape: number[] = [];
    let count = 1;
    for (let d = 0; d < rank; d++) {
      const extent = body.u32(`an extent of ${name}`);
      shape.push(extent);
      count *= extent;
    }
    const raw = body.take(4 * count, `the data of ${name}`);
    if (tensors.has(name)) {
      throw new MeldError(`duplicate tensor "${name}"`);
    }
    // copy out of the shared buffer and realign to 4 bytes
    const data = new Float32Array(count);
    const view = new DataView(raw.buffer, raw.byteOffset, raw.byteLength);
    for (let i = 0; i < count; i++) {
      data[i] = view.getFloat32(4 * i, true);
    }
    tensors.set(name, { name, shape, data });
  }

  const storedCrc = new DataView(buffer, bytes.length - 4, 4).getUint32(0, true);
  const actualCrc = crc32(bytes.subarray(0, bytes.length - 4));
  if (storedCrc !== actualCrc) {
    throw new ChecksumMismatchError(
      `checksum mismatch: stored 0x${storedCrc.toString(16).padStart(8, "0")}, ` +
        `computed 0x${actualCrc.toString(16).padStart(8, "0")}`,
    );
  }

  // validate names, order, and shapes against the embedded config
  const expected = tensorNamesFor(config);
  const gotNames = Array.from(tensors.keys());
  const expectedNames = expected.map(([n]) => n);
  if (
    gotNames.length !== expectedNames.length ||
    gotNames.some((n, i) => n !== expectedNames[i])
  ) {
    throw new WeightMismatchError(
      `weight bundle does not match config: expected [${expectedNames}], got [${gotNames}]`,
    );
  }
  let paramCount = 0;
  for (const [name, shape] of expected) {
    const tensor = tensors.get(name)!;
    if (
      tensor.shape.length !== shape.length ||
      tensor.shape.some((e, i) => e !== shape[i])
    ) {
      throw new WeightMismatchError(
        `tensor ${name} has shape [${tensor.shape}], config requires [${shape}]`,
      );
    }
    paramCount += tensor.data.length;
  }

  return { config, tensors, paramCount };
}
