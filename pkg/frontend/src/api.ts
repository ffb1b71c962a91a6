// Broker client over the documented HTTP endpoints. All session traffic uses
// the JSON forms; session opening posts a signed canonical envelope.

import type { ResultSet, RetrievalResult, SessionMode } from "./model.js";
import {
  decodeSessionId,
  encodeSignedEnvelope,
  makeParked,
  type Identity,
} from "./wire.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class BrokerApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function ensureOk(response: Response): Promise<Response> {
  if (response.ok) {
    return response;
  }
  let message = `${response.status}`;
  try {
    const body = (await response.json()) as { message?: string };
    if (body.message) {
      message = `${response.status}: ${body.message}`;
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new BrokerApiError(response.status, message);
}

export class BrokerClient {
  constructor(
    readonly brokerUrl: string,
    readonly identity: Identity,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private url(path: string): string {
    return this.brokerUrl.replace(/\/$/, "") + path;
  }

  async openSession(mode: SessionMode): Promise<string> {
    const envelope = makeParked(this.brokerUrl, mode);
    const notAfter = Math.floor(Date.now() / 1000) + 3600;
    const wire = await encodeSignedEnvelope(
      envelope,
      this.identity,
      this.brokerUrl,
      notAfter,
    );
    const response = await ensureOk(
      await this.fetchImpl(this.url("/agents"), {
        method: "POST",
        headers: { "Content-Type": "application/octet-stream" },
        body: wire as BodyInit,
      }),
    );
    return decodeSessionId(new Uint8Array(await response.arrayBuffer()));
  }

  async query(
    sessionId: string,
    imageBase64: string,
    k: number,
  ): Promise<ResultSet> {
    const response = await ensureOk(
      await this.fetchImpl(this.url(`/sessions/${sessionId}/query`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ imageBase64, k }),
      }),
    );
    return (await response.json()) as ResultSet;
  }

  /** Size in bytes of the mode-framed result transmission (GET, binary). */
  async resultTransmissionBytes(sessionId: string): Promise<number> {
    const response = await ensureOk(
      await this.fetchImpl(this.url(`/sessions/${sessionId}/result`), {
        method: "GET",
      }),
    );
    return (await response.arrayBuffer()).byteLength;
  }

  async retrieve(
    sessionId: string,
    purchaserId: string,
    items: { providerUrl: string; imageId: string; licenseToken: string }[],
  ): Promise<RetrievalResult[]> {
    const response = await ensureOk(
      await this.fetchImpl(this.url(`/sessions/${sessionId}/retrieve`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ purchaserId, items }),
      }),
    );
    const payload = (await response.json()) as { items: RetrievalResult[] };
    return payload.items;
  }

  async extractWatermark(imageBase64: string): Promise<string | null> {
    const response = await ensureOk(
      await this.fetchImpl(this.url("/watermark/extract"), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ imageBase64 }),
      }),
    );
    const payload = (await response.json()) as { identity: string | null };
    return payload.identity;
  }
}
