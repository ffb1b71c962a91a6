// Canonical envelope encoding and signing, byte-compatible with the broker.
// Big-endian integers, length-prefixed UTF-8 strings, u32-prefixed blobs.

const PROTOCOL_VERSION = 1;

export type AgentKind = "parked" | "messenger" | "index" | "search";
const KIND_CODES: Record<AgentKind, number> = {
  parked: 1,
  messenger: 2,
  index: 3,
  search: 4,
};

export type SessionMode = "messenger" | "messages";
const MODE_CODES: Record<SessionMode, number> = { messenger: 1, messages: 2 };

export type QueryPayloadKind = "feature" | "image";
const PAYLOAD_CODES: Record<QueryPayloadKind, number> = { feature: 1, image: 2 };

const utf8 = new TextEncoder();

export class ByteWriter {
  private chunks: Uint8Array[] = [];

  u8(v: number): this {
    this.chunks.push(Uint8Array.of(v & 0xff));
    return this;
  }

  u16(v: number): this {
    const buf = new Uint8Array(2);
    new DataView(buf.buffer).setUint16(0, v);
    this.chunks.push(buf);
    return this;
  }

  u32(v: number): this {
    const buf = new Uint8Array(4);
    new DataView(buf.buffer).setUint32(0, v >>> 0);
    this.chunks.push(buf);
    return this;
  }

  u64(v: number): this {
    const buf = new Uint8Array(8);
    new DataView(buf.buffer).setBigUint64(0, BigInt(v));
    this.chunks.push(buf);
    return this;
  }

  raw(bytes: Uint8Array): this {
    this.chunks.push(bytes);
    return this;
  }

  blob(bytes: Uint8Array): this {
    this.u32(bytes.length);
    this.chunks.push(bytes);
    return this;
  }

  text(s: string): this {
    return this.blob(utf8.encode(s));
  }

  bytes(): Uint8Array {
    const total = this.chunks.reduce((n, c) => n + c.length, 0);
    const out = new Uint8Array(total);
    let pos = 0;
    for (const chunk of this.chunks) {
      out.set(chunk, pos);
      pos += chunk.length;
    }
    return out;
  }
}

export interface QueryMessage {
  sessionId: string;
  payloadKind: QueryPayloadKind;
  payload: Uint8Array;
  k: number;
}

export function encodeQueryMessage(msg: QueryMessage): Uint8Array {
  return new ByteWriter()
    .text(msg.sessionId)
    .u8(PAYLOAD_CODES[msg.payloadKind])
    .blob(msg.payload)
    .u32(msg.k)
    .bytes();
}

export function encodeParkedState(
  replyAddress: string,
  mode: SessionMode,
  initialQuery: QueryMessage | null,
): Uint8Array {
  const w = new ByteWriter().text(replyAddress).u8(MODE_CODES[mode]);
  if (initialQuery === null) {
    w.u8(0);
  } else {
    w.u8(1).blob(encodeQueryMessage(initialQuery));
  }
  return w.bytes();
}

export function encodeMessengerState(query: QueryMessage): Uint8Array {
  return new ByteWriter().u8(1).blob(encodeQueryMessage(query)).bytes();
}

export interface Envelope {
  kind: AgentKind;
  agentId: string;
  itinerary: string[];
  state: Uint8Array;
}

export interface Identity {
  issuer: string;
  secret: Uint8Array;
}

function writeSharedFields(w: ByteWriter, env: Envelope): void {
  w.u16(PROTOCOL_VERSION).u8(KIND_CODES[env.kind]).text(env.agentId);
  w.u16(env.itinerary.length);
  for (const hop of env.itinerary) {
    w.text(hop);
  }
  w.blob(env.state);
}

export function signableBytes(
  env: Envelope,
  issuer: string,
  subject: string,
  notAfter: number,
): Uint8Array {
  const w = new ByteWriter();
  writeSharedFields(w, env);
  w.text(issuer).text(subject).u64(notAfter);
  return w.bytes();
}

export async function hmacSha256(
  secret: Uint8Array,
  data: Uint8Array,
): Promise<Uint8Array> {
  const key = await crypto.subtle.importKey(
    "raw",
    secret as BufferSource,
    { name: "HMAC", hash: "SHA-256" },
    false,
    ["sign"],
  );
  return new Uint8Array(await crypto.subtle.sign("HMAC", key, data as BufferSource));
}

export async function encodeSignedEnvelope(
  env: Envelope,
  identity: Identity,
  subject: string,
  notAfter: number,
): Promise<Uint8Array> {
  const mac = await hmacSha256(
    identity.secret,
    signableBytes(env, identity.issuer, subject, notAfter),
  );
  const w = new ByteWriter();
  writeSharedFields(w, env);
  w.text(identity.issuer).text(subject).u64(notAfter).raw(mac);
  return w.bytes();
}

export function freshAgentId(): string {
  const bytes = new Uint8Array(16);
  crypto.getRandomValues(bytes);
  return toHex(bytes);
}

export function makeParked(
  brokerUrl: string,
  mode: SessionMode,
  initialQuery: QueryMessage | null = null,
  replyAddress = "",
  agentId?: string,
): Envelope {
  return {
    kind: "parked",
    agentId: agentId ?? freshAgentId(),
    itinerary: [brokerUrl],
    state: encodeParkedState(replyAddress, mode, initialQuery),
  };
}

export function makeMessenger(
  destination: string,
  query: QueryMessage,
  agentId?: string,
): Envelope {
  return {
    kind: "messenger",
    agentId: agentId ?? freshAgentId(),
    itinerary: [destination],
    state: encodeMessengerState(query),
  };
}

// The broker answers a parked POST /agents with a length-prefixed session id.
export function decodeSessionId(reply: Uint8Array): string {
  if (reply.length < 4) {
    throw new Error("session reply too short");
  }
  const length = new DataView(reply.buffer, reply.byteOffset).getUint32(0);
  if (4 + length > reply.length) {
    throw new Error("session reply truncated");
  }
  return new TextDecoder().decode(reply.subarray(4, 4 + length));
}

export function toHex(bytes: Uint8Array): string {
  return Array.from(bytes)
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}

export function fromHex(hex: string): Uint8Array {
  const out = new Uint8Array(hex.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(hex.slice(2 * i, 2 * i + 2), 16);
  }
  return out;
}
