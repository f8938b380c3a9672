// Thin typed client for the study server's JSON API. The payloads carry
// only pair ids, opaque image tokens, and progress counters; nothing in
// this module ever sees degradation provenance.

export interface TrialPayload {
  pair_id: string;
  left: string; // opaque /img/<token> URL
  right: string;
  answered: number;
  total: number;
}

export interface DonePayload {
  done: true;
  answered: number;
  total: number;
}

export type NextResponse = TrialPayload | DonePayload;

export type Choice = "A" | "B";

export type SubmitResult = "stored" | "already-answered";

export class ApiError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
    this.name = "ApiError";
  }
}

export function isDone(resp: NextResponse): resp is DonePayload {
  return (resp as DonePayload).done === true;
}

export async function fetchNext(reader: string, baseUrl = ""): Promise<NextResponse> {
  let resp: Response;
  try {
    resp = await fetch(`${baseUrl}/api/next?reader=${encodeURIComponent(reader)}`);
  } catch (err) {
    throw new ApiError(`network failure: ${String(err)}`);
  }
  if (!resp.ok) {
    throw new ApiError(`next-pair request failed (${resp.status})`, resp.status);
  }
  return (await resp.json()) as NextResponse;
}

export async function submitChoice(
  reader: string,
  pairId: string,
  choice: Choice,
  elapsedMs: number,
  baseUrl = "",
): Promise<SubmitResult> {
  let resp: Response;
  try {
    resp = await fetch(`${baseUrl}/api/choice`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        pair_id: pairId,
        reader,
        choice,
        elapsed_ms: Math.round(elapsedMs),
      }),
    });
  } catch (err) {
    throw new ApiError(`network failure: ${String(err)}`);
  }
  if (resp.status === 409) {
    // the server already holds a choice for this pair; safe to advance
    return "already-answered";
  }
  if (!resp.ok) {
    throw new ApiError(`choice rejected (${resp.status})`, resp.status);
  }
  return "stored";
}
